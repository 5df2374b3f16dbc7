//! `gradcheck`: analytic-vs-finite-difference verification of the backward
//! pass, run for each loss term separately and then combined.

use clap::Args;

use surfelsplat_core::grad::{gradcheck, GradCheckConfig, TermMix};

use crate::config::CliError;

#[derive(Args)]
pub struct GradcheckArgs {
    /// Maximum accepted relative error where the gradient is significant.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Random micro-scenes per loss term.
    #[arg(long, default_value_t = 5)]
    scenes: usize,
    #[arg(long, default_value_t = 6)]
    surfels: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    #[arg(long, default_value_t = 12)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(args: GradcheckArgs) -> Result<(), CliError> {
    if args.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    let base = GradCheckConfig::default();
    let mixes =
        [TermMix::color_only(), TermMix::depth_only(), TermMix::normal_only(), TermMix::combined()];
    let mut results = Vec::with_capacity(mixes.len());
    let mut all_passed = true;
    for mix in mixes {
        let cfg = GradCheckConfig {
            seed: args.seed,
            scenes: args.scenes,
            surfels: args.surfels,
            width: args.width,
            height: args.height,
            views: args.views,
            tolerance: args.tol,
            terms: mix,
            ..base.clone()
        };
        let report = gradcheck(&cfg);
        eprintln!(
            "{}: {} scene(s), {} rejected, passed = {}",
            report.term_label, report.scenes_tested, report.scenes_rejected, report.passed
        );
        all_passed &= report.passed && report.scenes_tested >= args.scenes;
        results.push(serde_json::json!({
            "term": report.term_label,
            "scenes_tested": report.scenes_tested,
            "scenes_rejected": report.scenes_rejected,
            "tolerance": report.tolerance,
            "passed": report.passed,
            "classes": report
                .classes
                .iter()
                .map(|c| {
                    serde_json::json!({
                        "class": c.class,
                        "checked": c.checked,
                        "max_rel_err": c.max_rel_err,
                    })
                })
                .collect::<Vec<_>>(),
        }));
    }
    let summary = serde_json::json!({ "passed": all_passed, "terms": results });
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Numeric("gradient check failed; see the report above".into()))
    }
}
