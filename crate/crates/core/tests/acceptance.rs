//! Prints one PASS/FAIL line per acceptance criterion and exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ffn_lens::corpus::toy;
use ffn_lens::par::Execution;
use ffn_lens::pipeline::{cmd_all, Claim, RunConfig};

type Outcome = Result<String, String>;

fn check(n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let result = match result {
        Ok(_) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
        r => r,
    };
    let ok = result.is_ok();
    let detail = result.unwrap_or_else(|e| e);
    println!(
        "{} {n}. {name}: {detail} [{elapsed:.1?}]",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn worked_example() -> Outcome {
    common::worked_example_check()?;
    Ok("layer unions, intersection and differences exact".into())
}

fn set_algebra() -> Outcome {
    common::set_algebra_cases(1000, 2024)?;
    Ok("1000 random cases match brute force".into())
}

fn numerics() -> Outcome {
    let gelu = common::gelu_max_error(10_000);
    let grad = common::model_gradcheck_max_rel();
    let detail = format!("max GeLU error {gelu:.2e}, max gradient relative error {grad:.2e}");
    if gelu < 1e-9 && grad <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn capture_equivalence() -> Outcome {
    let (slow, fast) = common::slow_and_fast_dumps(25);
    if slow.row_index() != fast.row_index() {
        return Err("row indexes differ".into());
    }
    for (s, f) in slow.layers.iter().zip(&fast.layers) {
        if !common::equal_within_f32(&s.values, &f.values) {
            return Err(format!("layer {} differs beyond f32 rounding", s.layer));
        }
    }
    Ok(format!("{} rows x {} layers agree", slow.header.n_prefixes, slow.header.n_layers))
}

fn probe_sanity() -> Outcome {
    common::probe_sanity()?;
    Ok("accuracy 1.0, one detector >= 95%, shuffled labels within [0.4, 0.6] for 20 seeds".into())
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "svg")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn end_to_end(claims: &mut Vec<Claim>) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.tsv");
    let base = RunConfig::default();
    std::fs::write(&corpus, toy::to_tsv(&toy::generate(2000, base.seed))).unwrap();
    let mut runs = Vec::new();
    let mut times = Vec::new();
    for name in ["first", "second"] {
        let mut cfg = base.clone();
        cfg.corpus.path = corpus.clone();
        cfg.output_dir = tmp.path().join(name);
        let start = Instant::now();
        *claims = cmd_all(&cfg, Execution::default()).map_err(|e| e.to_string())?;
        let t = start.elapsed();
        if t > Duration::from_secs(600) {
            return Err(format!("{name} run took {t:.1?}"));
        }
        times.push(t);
        runs.push(outputs(&cfg.output_dir));
    }
    if runs[0].is_empty() {
        return Err("no CSV or SVG outputs".into());
    }
    if runs[0] != runs[1] {
        let differ: Vec<&String> = runs[0]
            .iter()
            .filter(|(k, v)| runs[1].get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(format!("outputs differ: {differ:?}"));
    }
    Ok(format!(
        "{} CSV/SVG files byte-identical; runs took {:.0?} and {:.0?}",
        runs[0].len(),
        times[0],
        times[1]
    ))
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= check(1, "worked example", Duration::from_secs(1), worked_example);
    ok &= check(2, "set-algebra oracle", Duration::from_secs(30), set_algebra);
    ok &= check(3, "numerics", Duration::from_secs(120), numerics);
    ok &= check(4, "capture equivalence", Duration::from_secs(60), capture_equivalence);
    ok &= check(5, "probe sanity", Duration::from_secs(60), probe_sanity);
    let mut claims = Vec::new();
    ok &= check(6, "end-to-end determinism", Duration::from_secs(1200), || end_to_end(&mut claims));
    let reported = check(7, "exploratory claims (reported)", Duration::MAX, || {
        if claims.len() != 3 {
            return Err(format!("{} claims evaluated", claims.len()));
        }
        Ok(claims
            .iter()
            .map(|c| format!("{} {}", c.status, c.title))
            .collect::<Vec<_>>()
            .join("; "))
    });
    ok &= reported;
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
