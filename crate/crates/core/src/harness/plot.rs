//! Standalone matplotlib scripts for the sweep figures. The data is embedded
//! so the script needs nothing but Python and matplotlib.

use std::fmt;
use std::str::FromStr;

use serde_json::json;

use crate::harness::analysis::{correlate, fig2_points, fig2_slopes, Regime, CORRELATE_COLUMNS};
use crate::harness::table::Table;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Figure {
    /// γ̂^M against γ̂^C with per-width and per-λ slopes.
    Fig2,
    /// Γce against the gap, coloured by λ.
    Fig3,
    /// Γce against the gap, coloured by width.
    Fig4,
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2" => Ok(Figure::Fig2),
            "fig3" => Ok(Figure::Fig3),
            "fig4" => Ok(Figure::Fig4),
            other => Err(Error::Parameter(format!("figure must be fig2, fig3 or fig4, got {other:?}"))),
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
        })
    }
}

const FIG2_BODY: &str = r#"
fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4.5))
for ax, key, fits, label in ((left, 0, DATA["by_width"], "width"), (right, 1, DATA["by_lambda"], "lambda")):
    cmap = plt.get_cmap("viridis", max(len(fits), 2))
    for i, fit in enumerate(fits):
        pts = [p for p in DATA["points"] if p[key] == fit["key"]]
        xs = [p[2] for p in pts]
        ys = [p[3] for p in pts]
        ax.scatter(xs, ys, s=12, color=cmap(i), label=f"{label}={fit['key']}  slope={fit['slope']:.3f}")
        if xs:
            top = max(xs)
            ax.plot([0, top], [0, fit["slope"] * top], "--", color=cmap(i), linewidth=1)
    ax.set_xlabel("gamma_hat_c (correct)")
    ax.set_ylabel("gamma_hat_m (misclassified)")
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(OUT, dpi=150)
"#;

const GAP_BODY: &str = r#"
fig, axes = plt.subplots(1, len(DATA["panels"]), figsize=(5.5 * len(DATA["panels"]), 4.5), squeeze=False)
for ax, panel in zip(axes[0], DATA["panels"]):
    keys = sorted({p[KEY] for p in panel["points"]})
    cmap = plt.get_cmap("viridis", max(len(keys), 2))
    for i, k in enumerate(keys):
        pts = [p for p in panel["points"] if p[KEY] == k]
        ax.scatter([p["gamma_ce"] for p in pts], [p["gap_ce"] for p in pts], color=cmap(i), label=f"{KEY}={k}")
    ax.set_title(f"{panel['epoch_budget']} epochs  pearson={panel['pearson_r']:.2f}")
    ax.set_xlabel("Gamma_ce")
    ax.set_ylabel("gap (test CE, AT minus standard)")
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(OUT, dpi=150)
"#;

fn header(figure: Figure, data: &serde_json::Value) -> Result<String> {
    Ok(format!(
        "#!/usr/bin/env python3\n# {figure}: generated by loat plotscript\nimport json\nimport sys\n\n\
         import matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n\
         OUT = sys.argv[1] if len(sys.argv) > 1 else \"{figure}.png\"\nDATA = json.loads(r'''{}''')\n",
        serde_json::to_string(data)?
    ))
}

/// Builds the script for `figure` from a sweep table.
pub fn plot_script(table: &Table, figure: Figure) -> Result<String> {
    match figure {
        Figure::Fig2 => {
            let slopes = fig2_slopes(table)?;
            let points = fig2_points(table)?;
            let data = json!({ "points": points, "by_width": slopes.by_width, "by_lambda": slopes.by_lambda });
            Ok(header(figure, &data)? + FIG2_BODY)
        }
        Figure::Fig3 | Figure::Fig4 => {
            table.require(&CORRELATE_COLUMNS)?;
            let mut panels = vec![correlate(table, Regime::Early)?];
            let late = correlate(table, Regime::Late)?;
            if late.epoch_budget != panels[0].epoch_budget {
                panels.push(late);
            }
            let key = if figure == Figure::Fig3 { "lambda" } else { "width" };
            let data = json!({ "panels": panels });
            Ok(header(figure, &data)? + &format!("KEY = {key:?}\n") + GAP_BODY)
        }
    }
}
