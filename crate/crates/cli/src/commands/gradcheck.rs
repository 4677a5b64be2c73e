use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use gsvox::gradcheck::{
    check_alignment, check_perceiver, check_predictor, check_rasterizer_pooled, GradcheckReport, Mutation,
};
use serde::Serialize;

use super::Ctx;
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::files::{create_dir, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    All,
    Rasterizer,
    Alignment,
    Predictor,
    Perceiver,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Which gradients to check.
    #[arg(long, value_enum, default_value_t = Component::All)]
    pub component: Component,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Random 5-Gaussian 8x8 scenes pooled for the rasteriser.
    #[arg(long, default_value_t = 10)]
    pub scenes: u64,
    /// Negate one analytic gradient group to confirm the check can fail.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

fn table(reports: &[GradcheckReport]) -> String {
    let mut s = format!("{:<11} {:<18} {:>7} {:>7} {:>12}\n", "component", "group", "coords", "passed", "max_rel_err");
    for r in reports {
        for g in &r.groups {
            writeln!(s, "{:<11} {:<18} {:>7} {:>7} {:>12.3e}", r.component, g.name, g.coords, g.passed, g.max_rel_err)
                .expect("string write");
        }
    }
    for r in reports {
        writeln!(
            s,
            "{:<11} {} {:.2}% of {} coordinates within {:e} (need {:.0}%)",
            r.component,
            if r.passed() { "PASS" } else { "FAIL" },
            100.0 * r.pass_fraction(),
            r.coords(),
            r.tolerance,
            100.0 * r.required_fraction
        )
        .expect("string write");
    }
    s
}

/// Analytic gradients against central differences; `gradcheck.json` and a
/// printed table with the worst relative error per parameter group.
pub fn gradcheck(ctx: &Ctx, args: &GradcheckArgs) -> Result<(), CliError> {
    ctx.sources.reject_any("gradcheck")?;
    let seed = ctx.seed();
    let m = if args.inject_sign_flip { Mutation::SignFlip } else { Mutation::None };
    let wants = |c: Component| args.component == Component::All || args.component == c;
    let mut reports = Vec::new();
    if wants(Component::Rasterizer) {
        reports.push(check_rasterizer_pooled(seed..seed + args.scenes.max(1), 5, m)?);
    }
    if wants(Component::Alignment) {
        reports.push(check_alignment(seed, m)?);
    }
    if wants(Component::Predictor) {
        reports.push(check_predictor(seed, m)?);
    }
    if wants(Component::Perceiver) {
        reports.push(check_perceiver(seed, m)?);
    }
    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&reports).expect("report serialises") + "\n";
    write_text(&args.out.join("gradcheck.json"), &json)?;
    print!("{}", table(&reports));
    write_snapshot::<_, ()>(&args.out, "gradcheck", seed, args, None)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
