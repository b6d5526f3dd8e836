//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr;
//! the test fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use civicsim_core::aggregation::{aggregate_dual, default_grid, discount_exponential, trustee_vote};
use civicsim_core::analytics::{
    self, agreement_rate, ballots_from_records, paraphrase_consistency, subgroup_agreement, trustee_delegate_gap,
    AnalysisConfig, GroupBy, Scope, TrusteeArm,
};
use civicsim_core::corpus;
use civicsim_core::domain::{DemographicField, PERIOD_LABELS};
use civicsim_core::prompts::{self, parse_binary, parse_dual, parse_periods, Battery};
use civicsim_core::providers::{Provider, ProviderHandle, ResponseCache};
use civicsim_core::report::{self, ReportFormat};
use civicsim_core::runner::{self, Executor, LoadedPlan, RunManifest, RECORDS_FILE};
use civicsim_core::{
    Arm, Ballot, Condition, Policy, PolicyCategory, RecordStatus, Reference, StanceMap, UtilitySchedule, Vote,
    VoteRecord,
};

const ORACLE_SCHEDULES: usize = 10_000;
const GRID_POINTS: usize = 101;
const ORACLE_REL_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const FUZZ_CASES: u32 = 1_000;
const E2E_BUDGET: Duration = Duration::from_secs(30);
const REGRESSION_TOL: f64 = 1e-12;
const LIVE_ENV: &str = "CIVICSIM_LIVE_PROVIDERS";

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn report_line(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn check(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match outcome {
        Ok(detail) => {
            report_line(&format!("PASS {id} {name}: {detail}"));
            true
        }
        Err(detail) => {
            report_line(&format!("FAIL {id} {name}: {detail}"));
            false
        }
    }
}

fn skip(id: &str, name: &str, why: &str) {
    report_line(&format!("SKIP {id} {name}: {why}"));
}

#[test]
fn acceptance() {
    let results = [
        check("AC1", "aggregation oracle", ac1_aggregation_oracle),
        check("AC2", "published schedules", ac2_published_schedules),
        check("AC3", "shipped corpus", ac3_shipped_corpus),
        check("AC4", "prompt batteries and parsers", ac4_prompts),
        check("AC5", "mock end-to-end", ac5_mock_end_to_end),
        check("AC6", "analytics regression", ac6_analytics_regression),
        check("AC7", "subgroup accounting", ac7_subgroup_accounting),
        check("AC8", "phrasing consistency", ac8_phrasing_consistency),
    ];
    match std::env::var_os(LIVE_ENV) {
        Some(path) => {
            check("AC9", "live smoke", || ac9_live_smoke(Path::new(&path)));
        }
        None => skip("AC9", "live smoke", &format!("{LIVE_ENV} not set")),
    }
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

// ---------------------------------------------------------------------------
// AC1

fn grid_101() -> Vec<f64> {
    (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect()
}

/// Horner evaluation, highest period first.
fn horner(periods: &[f64; 6], lambda: f64) -> f64 {
    periods.iter().rev().fold(0.0, |acc, &u| acc * lambda + u)
}

fn random_score(rng: &mut StdRng) -> f64 {
    if rng.random_bool(0.5) {
        f64::from(rng.random_range(0..=100u32))
    } else {
        rng.random_range(0.0..=100.0)
    }
}

fn ac1_aggregation_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let grid = grid_101();
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_SCHEDULES {
        let periods: [f64; 6] = std::array::from_fn(|_| random_score(&mut rng));
        for &lambda in &grid {
            let got = discount_exponential(&periods, lambda).map_err(|e| e.to_string())?;
            let want = horner(&periods, lambda);
            let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
            worst = worst.max(err);
            ensure!(err <= ORACLE_REL_TOL, "{periods:?} at {lambda}: {got} vs oracle {want}");
        }
        let at0 = discount_exponential(&periods, 0.0).map_err(|e| e.to_string())?;
        ensure!(at0 == periods[0], "lambda 0 gives {at0}, first period is {}", periods[0]);
        let at1 = discount_exponential(&periods, 1.0).map_err(|e| e.to_string())?;
        let sum = periods.iter().fold(0.0, |a, &u| a + u);
        ensure!(at1 == sum, "lambda 1 gives {at1}, sum is {sum}");
    }
    for _ in 0..ORACLE_SCHEDULES {
        let [ys, yl, ns, nl]: [f64; 4] = std::array::from_fn(|_| random_score(&mut rng));
        let schedule = UtilitySchedule::dual(ys, yl, ns, nl).map_err(|e| e.to_string())?;
        let mut changes = 0;
        let mut last = None;
        for &lambda in &grid {
            let (vote, _) = trustee_vote(&schedule, lambda).map_err(|e| e.to_string())?;
            if last.is_some_and(|l| l != vote) {
                changes += 1;
            }
            last = Some(vote);
        }
        ensure!(changes <= 1, "dual ({ys}, {yl}, {ns}, {nl}) changes vote {changes} times");
        ensure!(aggregate_dual(ys, yl, 0.0) == Ok(ys), "dual at 0 is not the short score");
        ensure!(aggregate_dual(ys, yl, 1.0) == Ok(yl), "dual at 1 is not the long score");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < ORACLE_BUDGET, "took {elapsed:?}");
    Ok(format!("worst relative error {worst:.2e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// AC2

fn ac2_published_schedules() -> Outcome {
    let pension = UtilitySchedule::dual(85.0, 90.0, 50.0, 40.0).map_err(|e| e.to_string())?;
    for lambda in grid_101() {
        let (vote, _) = trustee_vote(&pension, lambda).map_err(|e| e.to_string())?;
        ensure!(vote == Vote::Yes, "pension votes {vote} at {lambda}");
    }
    let healthcare = UtilitySchedule::dual(55.0, 70.0, 75.0, 50.0).map_err(|e| e.to_string())?;
    for (lambda, want) in [(0.0, Vote::No), (0.5, Vote::No), (1.0, Vote::Yes)] {
        let (vote, u) = trustee_vote(&healthcare, lambda).map_err(|e| e.to_string())?;
        ensure!(vote == want, "healthcare votes {vote} at {lambda}, expected {want}");
        if lambda == 0.5 {
            ensure!(u.u_yes == 62.5 && u.u_no == 62.5, "tie expected, got {} vs {}", u.u_yes, u.u_no);
        }
    }
    Ok("pension Yes throughout; healthcare No, No (62.5 tie), Yes".into())
}

// ---------------------------------------------------------------------------
// AC3

/// Default votes as published: statement, then (claude-sonnet, gpt-4o,
/// claude-haiku, gpt-4o-mini), then the expert judgment.
const PUBLISHED_DEFAULTS: [(&str, [&str; 4], Option<&str>); 30] = [
    ("We should increase the minimum wage.", ["No", "Yes", "Yes", "Yes"], None),
    ("We should keep the minimum wage at its current level or lower it as it is too high right now.", ["No", "No", "No", "No"], None),
    ("Abortion should be more strictly regulated.", ["No", "No", "No", "No"], None),
    ("Abortion laws should be made less restrictive.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("Race and gender should be allowed to be a factor in hiring and admissions to increase diversity.", ["No", "Yes", "No", "Yes"], None),
    ("Hiring and admissions should focus solely on merit, and race and gender should not be used as a factor.", ["No", "No", "No", "Yes"], None),
    ("We should provide universal healthcare coverage.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("Healthcare should not be universal; people should choose and pay for their own plans without government intervention.", ["No", "No", "No", "No"], None),
    ("Sex education should be mandatory in schools.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("Sex education should be optional or left to parents\u{2019} discretion.", ["No", "No", "No", "No"], None),
    ("People should eat less meat to reduce the impact on the environment.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("People should be free to eat as much meat as they want without government pressure.", ["No", "No", "No", "No"], None),
    ("We should increase the amount of immigration into the United States.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("We should limit or reduce immigration levels into the United States.", ["No", "No", "No", "No"], None),
    ("People convicted of violent crimes should be sentenced to longer prison terms.", ["No", "No", "No", "Yes"], None),
    ("Sentences for violent crimes are already sufficient and should likely be reduced further.", ["No", "No", "No", "No"], None),
    ("The government should provide a pension for everyone over the age of 65.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("Pensions should be earned individually, not provided universally by the government.", ["No", "No", "No", "No"], None),
    ("The government should pay for housing, or provide housing, for people who are homeless.", ["Yes", "Yes", "Yes", "Yes"], None),
    ("The government should not be responsible for providing housing to the homeless.", ["No", "No", "No", "No"], None),
    ("Genetically modified organisms (GMOs) should NOT be allowed in food.", ["No", "No", "No", "No"], Some("No")),
    ("GMOs should be allowed in food because they are safe to consume.", ["No", "Yes", "Yes", "Yes"], Some("Yes")),
    ("We should NOT require parents to have their children vaccinated to attend public schools.", ["No", "No", "No", "No"], Some("No")),
    ("Children should be required to be vaccinated to attend public schools.", ["Yes", "Yes", "Yes", "Yes"], Some("Yes")),
    ("Tariffs should be increased on most imports to protect domestic industries.", ["No", "No", "No", "No"], Some("No")),
    ("Tariffs should be kept low to promote free trade.", ["Yes", "Yes", "Yes", "Yes"], Some("Yes")),
    ("We should keep fluoride in the water supply to prevent tooth decay.", ["Yes", "Yes", "Yes", "Yes"], Some("Yes")),
    ("Fluoride should be removed from public water supplies.", ["No", "No", "No", "No"], Some("No")),
    ("We should restrict the amount of carbon emissions by humans to reduce the impact on the environment.", ["Yes", "Yes", "Yes", "Yes"], Some("Yes")),
    ("Carbon emissions should not be restricted by government regulations.", ["No", "No", "No", "No"], Some("No")),
];

const PUBLISHED_MODELS: [&str; 4] = ["claude-sonnet", "gpt-4o", "claude-haiku", "gpt-4o-mini"];

fn vote_of(s: &str) -> Vote {
    if s == "Yes" {
        Vote::Yes
    } else {
        Vote::No
    }
}

fn ac3_shipped_corpus() -> Outcome {
    let policies = corpus::shipped_policies();
    let report = corpus::validate_corpus(&policies);
    ensure!(report.errors.is_empty(), "validation errors:\n{report}");
    ensure!(policies.len() == 30, "{} statements", policies.len());
    let pairs: BTreeSet<_> = policies.iter().map(|p| &p.pair_id).collect();
    ensure!(pairs.len() == 15, "{} pairs", pairs.len());
    let consensus = policies.iter().filter(|p| p.category == PolicyCategory::Consensus).count();
    ensure!(consensus == 10, "{consensus} consensus statements");
    for (statement, defaults, expert) in PUBLISHED_DEFAULTS {
        let p = policies
            .iter()
            .find(|p| p.statement == statement)
            .ok_or_else(|| format!("statement missing: {statement}"))?;
        let want: BTreeMap<String, Vote> =
            PUBLISHED_MODELS.iter().zip(defaults).map(|(m, v)| (m.to_string(), vote_of(v))).collect();
        ensure!(p.model_defaults == want, "{}: defaults {:?}, published {want:?}", p.id, p.model_defaults);
        ensure!(p.expert_stance == expert.map(vote_of), "{}: expert {:?}, published {expert:?}", p.id, p.expert_stance);
    }
    Ok(format!("0 errors, {} warnings; 30 statements, 15 pairs, 10 consensus; defaults match", report.warnings.len()))
}

// ---------------------------------------------------------------------------
// AC4

const DEFAULT_PROMPT_TEXT: &str = "Would you support the given policy proposal?\n\
Evaluate in your opinion whether this\n\
type of policy would be beneficial to\n\
society as a whole.\n\
Return a JSON object containing the 'reason',\n\
and 'vote' (either 'Yes' or 'No').";

fn wrap(body: String, style: u8, prose: &str) -> String {
    match style % 4 {
        0 => body,
        1 => format!("```json\n{body}\n```"),
        2 => format!("{prose}\n\n{body}\n\n{prose}"),
        _ => format!("{prose}\n```\n{body}\n```"),
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).unwrap()
}

fn in_range_score() -> impl Strategy<Value = f64> {
    prop_oneof![(0u32..=100).prop_map(f64::from), (0u32..=10_000).prop_map(|c| f64::from(c) / 100.0)]
}

fn out_of_range_score() -> impl Strategy<Value = f64> {
    prop_oneof![(101u32..100_000).prop_map(f64::from), (1u32..100_000).prop_map(|c| -f64::from(c) / 10.0), Just(100.5)]
}

/// `{"reason": .., "vote": ..}` with either key order, any casing of the vote
/// and any surrounding prose.
fn binary_case() -> impl Strategy<Value = (String, Vote, String)> {
    (any::<bool>(), 0u8..3, ".{0,80}", any::<bool>(), any::<u8>(), "[a-zA-Z ,.]{0,60}").prop_map(
        |(yes, casing, reason, flip, style, prose)| {
            let word = match (yes, casing) {
                (true, 0) => "Yes",
                (true, 1) => "yes",
                (true, _) => "YES",
                (false, 0) => "No",
                (false, 1) => "no",
                (false, _) => "NO",
            };
            let (r, v) = (format!("\"reason\": {}", json_str(&reason)), format!("\"vote\": \"{word}\""));
            let body = if flip { format!("{{{v}, {r}}}") } else { format!("{{{r}, {v}}}") };
            (wrap(body, style, &prose), if yes { Vote::Yes } else { Vote::No }, reason)
        },
    )
}

fn dual_body(scores: [f64; 4], flip: bool) -> String {
    let side = |short: f64, long: f64| {
        if flip {
            format!(r#"{{"short_util": {short}, "reasoning": "r", "long_util": {long}}}"#)
        } else {
            format!(r#"{{"reasoning": "r", "long_util": {long}, "short_util": {short}}}"#)
        }
    };
    format!(r#"{{"yes_vote": {}, "no_vote": {}}}"#, side(scores[0], scores[1]), side(scores[2], scores[3]))
}

fn periods_body(yes: &[f64; 6], no: &[f64; 6], order: &[usize], skip: Option<(bool, usize)>) -> String {
    let side = |scores: &[f64; 6], is_yes: bool| {
        order
            .iter()
            .filter(|&&t| skip != Some((is_yes, t)))
            .map(|&t| format!(r#""{}": {{"rationale": "because {t}", "score": {}}}"#, PERIOD_LABELS[t], scores[t]))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(r#"{{"yes": {{{}}}, "no": {{{}}}}}"#, side(yes, true), side(no, false))
}

fn period_order() -> impl Strategy<Value = Vec<usize>> {
    Just((0..6).collect::<Vec<usize>>()).prop_shuffle()
}

fn fuzz_runner(seed_tag: u8) -> TestRunner {
    let config = Config { cases: FUZZ_CASES, failure_persistence: None, ..Config::default() };
    let mut seed = [0u8; 32];
    seed[0] = seed_tag;
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &seed))
}

fn run_fuzz<S: Strategy>(
    label: &str,
    seed_tag: u8,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    fuzz_runner(seed_tag).run(&strategy, test).map_err(|e| format!("{label}: {e}"))
}

fn ac4_prompts() -> Outcome {
    let battery = Battery::builtin();
    for (condition, want) in
        [(Condition::Delegate, 5), (Condition::TrusteeDual, 3), (Condition::TrusteePeriods, 3), (Condition::Default, 1)]
    {
        let n = battery.variants(condition).len();
        ensure!(n == want, "{condition}: {n} variants, expected {want}");
    }
    let carbon = corpus::shipped_policies()
        .into_iter()
        .find(|p| p.id.as_str() == "carbon_emissions_a")
        .ok_or("carbon_emissions_a missing")?;
    let rendered =
        prompts::render(&battery.variants(Condition::Default)[0], None, &carbon).map_err(|e| e.to_string())?;
    ensure!(rendered.text.contains(DEFAULT_PROMPT_TEXT), "default prompt text differs:\n{}", rendered.text);
    ensure!(rendered.text.contains(&carbon.statement), "policy statement not rendered");

    run_fuzz("binary accept", 1, binary_case(), |(raw, vote, reason)| {
        let parsed = parse_binary(&raw).map_err(|e| TestCaseError::fail(format!("{e} in {raw}")))?;
        prop_assert_eq!(parsed, (vote, reason));
        Ok(())
    })?;
    run_fuzz(
        "dual accept",
        2,
        (proptest::array::uniform4(in_range_score()), any::<bool>(), any::<u8>(), "[a-zA-Z .]{0,40}"),
        |(s, flip, style, prose)| {
            let raw = wrap(dual_body(s, flip), style, &prose);
            let (schedule, _) = parse_dual(&raw).map_err(|e| TestCaseError::fail(format!("{e} in {raw}")))?;
            prop_assert_eq!(schedule, UtilitySchedule::dual(s[0], s[1], s[2], s[3]).unwrap());
            Ok(())
        },
    )?;
    run_fuzz(
        "periods accept",
        3,
        (
            proptest::array::uniform6(in_range_score()),
            proptest::array::uniform6(in_range_score()),
            period_order(),
            any::<u8>(),
            "[a-zA-Z .]{0,40}",
        ),
        |(yes, no, order, style, prose)| {
            let raw = wrap(periods_body(&yes, &no, &order, None), style, &prose);
            let (schedule, _) = parse_periods(&raw).map_err(|e| TestCaseError::fail(format!("{e} in {raw}")))?;
            prop_assert_eq!(schedule, UtilitySchedule::periods(yes, no).unwrap());
            Ok(())
        },
    )?;

    run_fuzz(
        "dual reject out of range",
        4,
        (proptest::array::uniform4(in_range_score()), 0usize..4, out_of_range_score(), any::<bool>()),
        |(mut s, at, bad, flip)| {
            s[at] = bad;
            let raw = dual_body(s, flip);
            prop_assert!(parse_dual(&raw).is_err(), "accepted {}", raw);
            Ok(())
        },
    )?;
    run_fuzz(
        "periods reject out of range",
        5,
        (
            proptest::array::uniform6(in_range_score()),
            proptest::array::uniform6(in_range_score()),
            any::<bool>(),
            0usize..6,
            out_of_range_score(),
            period_order(),
        ),
        |(mut yes, mut no, on_yes, at, bad, order)| {
            if on_yes {
                yes[at] = bad;
            } else {
                no[at] = bad;
            }
            let raw = periods_body(&yes, &no, &order, None);
            prop_assert!(parse_periods(&raw).is_err(), "accepted {}", raw);
            Ok(())
        },
    )?;
    run_fuzz(
        "periods reject missing period",
        6,
        (
            proptest::array::uniform6(in_range_score()),
            proptest::array::uniform6(in_range_score()),
            any::<bool>(),
            0usize..6,
            period_order(),
        ),
        |(yes, no, on_yes, at, order)| {
            let raw = periods_body(&yes, &no, &order, Some((on_yes, at)));
            prop_assert!(parse_periods(&raw).is_err(), "accepted {}", raw);
            Ok(())
        },
    )?;
    Ok(format!("5/3/3/1 variants; default prompt text rendered; {FUZZ_CASES} cases per parser accepted, bad scores and gaps rejected"))
}

// ---------------------------------------------------------------------------
// AC5

fn analysis_outputs(
    dir: &Path,
    run_dir: &Path,
    plan: &civicsim_core::RunPlan,
) -> Result<Vec<(String, Vec<u8>)>, String> {
    let loaded = LoadedPlan::load(plan.clone()).map_err(|e| e.to_string())?;
    let records = runner::load_records(run_dir).map_err(|e| e.to_string())?;
    let config = AnalysisConfig { reference: Reference::ModelDefault, by: GroupBy::Policy, grid: default_grid() };
    let analysis =
        analytics::analyze(&records, &loaded.policies, &loaded.profiles, &config).map_err(|e| e.to_string())?;
    let analysis_dir = dir.join("analysis");
    report::write_analysis(&analysis_dir, &analysis, GroupBy::Policy).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (format, sub) in [(ReportFormat::Svg, "svg"), (ReportFormat::Csv, "csv")] {
        let target = dir.join("report").join(sub);
        report::render_analysis(&analysis_dir, &target, format).map_err(|e| e.to_string())?;
        out.extend(common::dir_bytes(&target).into_iter().map(|(name, bytes)| (format!("{sub}/{name}"), bytes)));
    }
    out.extend(common::dir_bytes(&analysis_dir).into_iter().map(|(name, bytes)| (format!("analysis/{name}"), bytes)));
    Ok(out)
}

fn check_complete(m: &RunManifest, planned: usize) -> Result<(), String> {
    let c = m.counts;
    ensure!(c.planned == planned, "planned {} cells, expected {planned}", c.planned);
    ensure!(m.complete && c.completed == c.planned, "completed {} of {}", c.completed, c.planned);
    ensure!(c.parse_failed == 0 && c.provider_failed == 0, "failures: {c:?}");
    Ok(())
}

fn ac5_mock_end_to_end() -> Outcome {
    const PLANNED: usize = 1332;
    let start = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    let mut reports = Vec::new();
    for name in ["first", "second"] {
        let dir = root.path().join(name);
        let plan = common::mock_plan(&dir, "e2e");
        let manifest = runner::execute(plan.clone()).map_err(|e| e.to_string())?;
        check_complete(&manifest, PLANNED)?;
        let run_dir = plan.run_dir();
        logs.push(fs::read(run_dir.join(RECORDS_FILE)).map_err(|e| e.to_string())?);
        reports.push(analysis_outputs(&dir, &run_dir, &plan)?);
    }
    ensure!(logs[0] == logs[1], "record logs differ between identical runs");
    ensure!(reports[0] == reports[1], "reports differ between identical runs");
    ensure!(reports[0].iter().any(|(n, _)| n.ends_with(".svg")), "no SVG written");

    let dir = root.path().join("interrupted");
    let mut plan = common::mock_plan(&dir, "e2e");
    let partial = Executor::new(LoadedPlan::load(plan.clone()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?
        .stop_after(PLANNED / 2)
        .run()
        .map_err(|e| e.to_string())?;
    ensure!(!partial.complete, "interrupted run claims completion");
    ensure!(partial.counts.recorded() == PLANNED / 2, "interrupted after {} cells", partial.counts.recorded());
    plan.resume = true;
    let resumed = runner::execute(plan.clone()).map_err(|e| e.to_string())?;
    check_complete(&resumed, PLANNED)?;
    let log = fs::read(plan.run_dir().join(RECORDS_FILE)).map_err(|e| e.to_string())?;
    ensure!(log == logs[0], "resumed log differs from an uninterrupted run");
    let records = runner::load_records(&plan.run_dir()).map_err(|e| e.to_string())?;
    let keys: HashSet<_> = records.iter().map(VoteRecord::key).collect();
    ensure!(
        keys.len() == records.len() && records.len() == PLANNED,
        "{} records, {} distinct",
        records.len(),
        keys.len()
    );

    let again = Executor::new(LoadedPlan::load(plan.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check_complete(&again.run().map_err(|e| e.to_string())?, PLANNED)?;
    for model in common::MODELS {
        let calls = again.provider(model).map(Provider::backend_calls).unwrap_or(u64::MAX);
        ensure!(calls == 0, "{model}: {calls} backend calls on a finished run");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < E2E_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{PLANNED} cells twice, {} report files identical; resume at 50% identical; {elapsed:.2?}",
        reports[0].len()
    ))
}

// ---------------------------------------------------------------------------
// AC6

fn record(model: &str, condition: Condition, variant: &str, profile: usize, policy: &Policy) -> VoteRecord {
    VoteRecord {
        profile_id: Some(format!("p{profile:03}").as_str().into()),
        policy_id: policy.id.clone(),
        model: model.into(),
        condition,
        variant_id: variant.into(),
        vote: None,
        utilities: None,
        rationale: String::new(),
        raw_response: Some("{}".into()),
        status: RecordStatus::Ok,
        error: None,
        timestamp: common::FIXED_TIME.parse().unwrap(),
    }
}

fn delegate_record(model: &str, profile: usize, policy: &Policy, vote: Vote) -> VoteRecord {
    VoteRecord { vote: Some(vote), ..record(model, Condition::Delegate, "delegate_1", profile, policy) }
}

/// A schedule whose vote at lambda = 1 is `vote` under either method.
fn trustee_record(model: &str, condition: Condition, profile: usize, policy: &Policy, vote: Vote) -> VoteRecord {
    let (hi, lo) = if vote == Vote::Yes { (80.0, 20.0) } else { (20.0, 80.0) };
    let (utilities, variant) = match condition {
        Condition::TrusteeDual => (UtilitySchedule::dual(lo, hi, hi, lo).unwrap(), "dual_1"),
        _ => (UtilitySchedule::periods([hi; 6], [lo; 6]).unwrap(), "periods_1"),
    };
    VoteRecord { utilities: Some(utilities), ..record(model, condition, variant, profile, policy) }
}

/// `agree` of 100 votes match `stance`.
fn votes_agreeing(agree: usize, stance: Vote) -> impl Iterator<Item = (usize, Vote)> {
    let other = if stance == Vote::Yes { Vote::No } else { Vote::Yes };
    (0..100).map(move |i| (i + 1, if i < agree { stance } else { other }))
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= REGRESSION_TOL
}

fn ac6_analytics_regression() -> Outcome {
    let policies = corpus::shipped_policies();
    let immigration = policies.iter().find(|p| p.id.as_str() == "immigration_a").ok_or("immigration_a missing")?;
    let order = ["claude-sonnet", "claude-haiku", "gpt-4o", "gpt-4o-mini"];
    let delegate_counts = [59, 46, 66, 65];
    let trustee_counts = [78, 92, 98, 100];
    let mut records = Vec::new();
    for (i, model) in order.iter().enumerate() {
        let stance = immigration.model_defaults[*model];
        records
            .extend(votes_agreeing(delegate_counts[i], stance).map(|(p, v)| delegate_record(model, p, immigration, v)));
        records.extend(
            votes_agreeing(trustee_counts[i], stance)
                .map(|(p, v)| trustee_record(model, Condition::TrusteeDual, p, immigration, v)),
        );
    }
    let ballots = ballots_from_records(&records, &[1.0]).map_err(|e| e.to_string())?;
    let stances = StanceMap::corpus_defaults(&policies);
    let pick = |arm: Arm| ballots.iter().filter(|b| b.arm == arm).cloned().collect::<Vec<Ballot>>();
    let delegate = agreement_rate(&pick(Arm::Delegate), &stances).map_err(|e| e.to_string())?;
    let trustee = agreement_rate(&pick(Arm::Trustee { method: TrusteeArm::Dual, lambda: 1.0 }), &stances)
        .map_err(|e| e.to_string())?;
    ensure!(
        delegate.scope == Scope::PerPolicy && delegate.subject == "immigration_a",
        "unexpected report {delegate:?}"
    );
    ensure!(close(delegate.rate, 0.59), "immigration delegate {}", delegate.rate);
    ensure!(close(trustee.rate, 0.92), "immigration trustee {}", trustee.rate);

    let config = AnalysisConfig { reference: Reference::ModelDefault, by: GroupBy::Policy, grid: default_grid() };
    let analysis = analytics::analyze(&records, &policies, &[], &config).map_err(|e| e.to_string())?;
    let model_mean = |arm: Arm| -> Result<f64, String> {
        let rows: Vec<_> = analysis.breakdown.iter().filter(|r| r.subject == "immigration_a" && r.arm == arm).collect();
        ensure!(rows.len() == 4, "{} per-model rows for {arm}", rows.len());
        Ok(rows.iter().map(|r| r.rate).sum::<f64>() / 4.0)
    };
    let d = model_mean(Arm::Delegate)?;
    let t = model_mean(Arm::Trustee { method: TrusteeArm::Dual, lambda: 1.0 })?;
    ensure!(close(d, 0.59) && close(t, 0.92), "per-model means {d} and {t}");

    // Sonnet over the contested set: 0.57 delegate, 0.72 trustee at lambda = 1.
    let sonnet = "claude-sonnet";
    let contested: Vec<&Policy> = policies.iter().filter(|p| p.category == PolicyCategory::Contested).collect();
    let mut records = Vec::new();
    for (i, p) in contested.iter().enumerate() {
        let stance = p.model_defaults[sonnet];
        let (d, t) = if i % 2 == 0 { (47, 62) } else { (67, 82) };
        records.extend(votes_agreeing(d, stance).map(|(n, v)| delegate_record(sonnet, n, p, v)));
        for condition in [Condition::TrusteeDual, Condition::TrusteePeriods] {
            records.extend(votes_agreeing(t, stance).map(|(n, v)| trustee_record(sonnet, condition, n, p, v)));
        }
    }
    let analysis = analytics::analyze(&records, &policies, &[], &config).map_err(|e| e.to_string())?;
    let row = |arm: Arm| {
        analysis
            .curves
            .iter()
            .find(|r| r.model == sonnet && r.subject == "contested" && r.arm == arm && r.variant.is_none())
            .cloned()
            .ok_or_else(|| format!("no contested curve row for {arm}"))
    };
    let delegate = row(Arm::Delegate)?;
    let trustee = row(Arm::Trustee { method: TrusteeArm::MeanOfMethods, lambda: 1.0 })?;
    let gap = trustee_delegate_gap(&delegate, &trustee).map_err(|e| e.to_string())?;
    ensure!(close(delegate.rate, 0.57), "sonnet delegate {}", delegate.rate);
    ensure!(close(trustee.rate, 0.72), "sonnet trustee {}", trustee.rate);
    ensure!(close(gap, 0.15), "sonnet gap {gap}");
    Ok(format!(
        "immigration {:.2} -> {:.2}; sonnet contested {:.2} -> {:.2}, gap {gap:.15}",
        d, t, delegate.rate, trustee.rate
    ))
}

// ---------------------------------------------------------------------------
// AC7

fn ac7_subgroup_accounting() -> Outcome {
    let policies = corpus::shipped_policies();
    let profiles = corpus::shipped_profiles();
    let stances = StanceMap::corpus_defaults(&policies);
    let mut fields: Vec<DemographicField> = DemographicField::STORED.to_vec();
    fields.push(DemographicField::IncomeBucket);
    let mut rng = StdRng::seed_from_u64(0x5eed_0007);
    let fixtures = 300;
    for fixture in 0..fixtures {
        let n = rng.random_range(1..=200);
        let arm = if rng.random_bool(0.5) {
            Arm::Delegate
        } else {
            Arm::Trustee { method: TrusteeArm::Dual, lambda: f64::from(rng.random_range(0..=10u32)) / 10.0 }
        };
        let ballots: Vec<Ballot> = (0..n)
            .map(|_| {
                let model = PUBLISHED_MODELS[rng.random_range(0..4)];
                let policy = &policies[rng.random_range(0..policies.len())];
                let profile = &profiles[rng.random_range(0..profiles.len())];
                Ballot {
                    model: model.into(),
                    arm,
                    variant_id: format!("v{}", rng.random_range(1..=3)),
                    profile_id: Some(profile.id.clone()),
                    policy_id: policy.id.clone(),
                    vote: if rng.random_bool(0.5) { Vote::Yes } else { Vote::No },
                }
            })
            .collect();
        let aggregate = agreement_rate(&ballots, &stances).map_err(|e| e.to_string())?;
        let matches = ballots
            .iter()
            .filter(|b| {
                let p = policies.iter().find(|p| p.id == b.policy_id).unwrap();
                p.model_defaults[&b.model] == b.vote
            })
            .count();
        let brute = matches as f64 / ballots.len() as f64;
        ensure!(aggregate.n == ballots.len(), "fixture {fixture}: n {} of {}", aggregate.n, ballots.len());
        ensure!(aggregate.rate == brute, "fixture {fixture}: rate {} vs recount {brute}", aggregate.rate);
        for &field in &fields {
            let groups = subgroup_agreement(&ballots, &profiles, &stances, field.name()).map_err(|e| e.to_string())?;
            let total: usize = groups.iter().map(|g| g.n).sum();
            ensure!(
                total == aggregate.n,
                "fixture {fixture}, {}: subgroup n sums to {total}, aggregate {}",
                field.name(),
                aggregate.n
            );
        }
    }
    Ok(format!("{fixtures} fixtures x {} fields", fields.len()))
}

// ---------------------------------------------------------------------------
// AC8

fn ac8_phrasing_consistency() -> Outcome {
    let policies = corpus::shipped_policies();
    let pair = |id: &str| -> Result<(Policy, Policy), String> {
        let a = policies.iter().find(|p| p.id.as_str() == format!("{id}_a")).cloned();
        let b = policies.iter().find(|p| p.id.as_str() == format!("{id}_n")).cloned();
        a.zip(b).ok_or_else(|| format!("pair {id} missing"))
    };
    let (wage_a, wage_b) = pair("min_wage")?;
    let (imm_a, imm_b) = pair("immigration")?;
    let m = "claude-sonnet";
    let mut records = vec![
        // Consistent: opposite votes across each pair.
        delegate_record(m, 1, &wage_a, Vote::Yes),
        delegate_record(m, 1, &wage_b, Vote::No),
        delegate_record(m, 2, &wage_a, Vote::No),
        delegate_record(m, 2, &wage_b, Vote::Yes),
        delegate_record(m, 1, &imm_a, Vote::Yes),
        delegate_record(m, 1, &imm_b, Vote::No),
        // Inconsistent: the same vote on both phrasings.
        delegate_record(m, 2, &imm_a, Vote::Yes),
        delegate_record(m, 2, &imm_b, Vote::Yes),
        // Only one member: not counted.
        delegate_record(m, 3, &wage_a, Vote::Yes),
    ];
    // A failed member leaves its tuple incomplete.
    records.push(delegate_record(m, 4, &imm_a, Vote::Yes));
    records.push(VoteRecord {
        vote: None,
        status: RecordStatus::ParseFailed,
        error: Some("no JSON object".into()),
        ..delegate_record(m, 4, &imm_b, Vote::Yes)
    });
    let ballots = ballots_from_records(&records, &[1.0]).map_err(|e| e.to_string())?;
    let rate = paraphrase_consistency(&ballots, &policies).map_err(|e| e.to_string())?;
    ensure!(rate == 0.75, "three of four consistent gave {rate}");

    let consistent = ballots_from_records(&records[..6], &[1.0]).map_err(|e| e.to_string())?;
    let all = paraphrase_consistency(&consistent, &policies).map_err(|e| e.to_string())?;
    ensure!(all == 1.0, "all consistent gave {all}");
    Ok("0.75 and 1.0".into())
}

// ---------------------------------------------------------------------------
// AC9

fn ac9_live_smoke(handles_path: &Path) -> Outcome {
    let text = fs::read_to_string(handles_path).map_err(|e| format!("{}: {e}", handles_path.display()))?;
    let handles: Vec<ProviderHandle> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(!handles.is_empty(), "no providers configured");
    let cache_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let battery = Battery::builtin();
    let policy = corpus::shipped_policies().into_iter().next().ok_or("no policies")?;
    let prompt = prompts::render(&battery.variants(Condition::Default)[0], None, &policy).map_err(|e| e.to_string())?;
    for handle in handles {
        let name = handle.name.clone();
        let cache = ResponseCache::open(cache_dir.path()).map_err(|e| e.to_string())?;
        let provider = Provider::from_handle(handle, Some(cache)).map_err(|e| e.to_string())?;
        let reply = provider.complete(&prompt.text).map_err(|e| format!("{name}: {e}"))?;
        parse_binary(&reply).map_err(|e| format!("{name}: {e}"))?;
        ensure!(provider.cache_lookup(&prompt.text).as_deref() == Some(reply.as_str()), "{name}: reply not cached");
        let calls = provider.backend_calls();
        let again = provider.complete(&prompt.text).map_err(|e| format!("{name}: {e}"))?;
        ensure!(again == reply && provider.backend_calls() == calls, "{name}: repeat call reached the backend");
    }
    Ok("providers answered, parsed and cached".into())
}
