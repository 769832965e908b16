//! Long-format tabular exports for plotting. No plotting library is
//! embedded; any tool can consume these CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ResolvedConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{read_bounds, read_divergence, read_stability};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    BoundCurves,
    ValidityVsTau,
    DivergenceTrace,
}

impl Figure {
    pub fn from_name(name: &str) -> Result<Figure> {
        match name {
            "bound-curves" => Ok(Figure::BoundCurves),
            "validity-vs-tau" => Ok(Figure::ValidityVsTau),
            "divergence-trace" => Ok(Figure::DivergenceTrace),
            _ => Err(CliError::Config(format!(
                "unknown figure '{name}'; expected bound-curves, validity-vs-tau, or divergence-trace"
            ))),
        }
    }

    fn file_name(&self) -> &'static str {
        match self {
            Figure::BoundCurves => "bound_curves.csv",
            Figure::ValidityVsTau => "validity_vs_tau.csv",
            Figure::DivergenceTrace => "divergence_trace.csv",
        }
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

/// Write the requested figure data from the run artifacts in `out`.
/// Returns the path of the written file.
pub fn emit_plot_data(cfg: &ResolvedConfig, out: &Path, figure: Figure) -> Result<PathBuf> {
    let dir = out.join("figures");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(figure.file_name());
    let header = format!("# config_hash={}\n# seed={}\n", cfg.hash, cfg.config.seed);
    let mut text = header;
    match figure {
        Figure::BoundCurves => {
            let rows = read_bounds(cfg, out)?;
            text.push_str("theorem,k,epsilon,ell,rhs,freq\n");
            for r in rows {
                let ell = r.ell.map(fmt_f).unwrap_or_default();
                let _ = writeln!(
                    text,
                    "{},{},{},{ell},{},{}",
                    r.theorem,
                    r.k,
                    fmt_f(r.epsilon),
                    fmt_f(r.rhs),
                    fmt_f(r.freq)
                );
            }
        }
        Figure::ValidityVsTau => {
            let rows = read_stability(cfg, out)?;
            text.push_str("tau,cohort_size,validity_rate\n");
            for i in 0..=20 {
                let tau = i as f64 / 20.0;
                let cohort: Vec<&crate::pipeline::StabilityRow> =
                    rows.iter().filter(|r| r.rhat >= tau).collect();
                let rate = if cohort.is_empty() {
                    String::new()
                } else {
                    fmt_f(cohort.iter().map(|r| r.validity_rate).sum::<f64>() / cohort.len() as f64)
                };
                let _ = writeln!(text, "{},{},{rate}", fmt_f(tau), cohort.len());
            }
        }
        Figure::DivergenceTrace => {
            let rows = read_divergence(cfg, out)?;
            text.push_str("t,delta_t,analytic_bound_prefix\n");
            for (t, d, b) in rows {
                let _ = writeln!(text, "{t},{},{}", fmt_f(d), fmt_f(b));
            }
        }
    }
    std::fs::write(&path, text)?;
    Ok(path)
}
