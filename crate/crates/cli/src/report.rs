//! Worst-k error gallery: per-fold crops with their CE, as markdown and HTML.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use solis_core::dataset::load_manifest;
use solis_core::segmentation::{crop_roi, detect_vial};
use solis_core::trainer::{load_report, load_run_config, load_run_info};
use solis_core::PredictionRecord;

/// File-name-safe version of a sample id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn target(p: &PredictionRecord) -> String {
    p.target.map_or_else(|| "-".into(), |t| t.to_string())
}

pub fn write(run: &Path, out: &Path) -> anyhow::Result<()> {
    let report = load_report(run)?;
    let config = load_run_config(run)?;
    let info = load_run_info(run)?;
    let manifest = load_manifest(&info.manifest, false)
        .with_context(|| format!("loading the run's manifest {}", info.manifest.display()))?;
    let detector = config.detector.build(run, None)?;
    let crops = out.join("crops");
    fs::create_dir_all(&crops).with_context(|| format!("creating {}", crops.display()))?;

    let mut md = String::new();
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Worst predictions</title>\n\
         <style>body{font-family:sans-serif}td,th{padding:4px 8px;text-align:left}img{max-height:160px}</style>\n\
         </head><body>\n",
    );
    let summary = format!(
        "pooled accuracy {:.4}, CE {:.4} ± {:.4} over {} samples",
        report.pooled_accuracy, report.ce_mean, report.ce_std, report.metadata.n_samples
    );
    writeln!(md, "# Worst predictions per fold\n\n{summary}\n")?;
    writeln!(
        html,
        "<h1>Worst predictions per fold</h1>\n<p>{}</p>",
        escape_html(&summary)
    )?;

    for (fold, worst) in &report.worst_k {
        writeln!(md, "## Fold {fold}\n\n| sample | target | predicted | p(dissolved) | CE | crop |\n|---|---|---|---|---|---|")?;
        writeln!(
            html,
            "<h2>Fold {fold}</h2>\n<table>\n<tr><th>sample</th><th>target</th><th>predicted</th><th>p(dissolved)</th><th>CE</th><th>crop</th></tr>"
        )?;
        for p in worst {
            let name = format!("crops/{}.png", file_stem(&p.sample_id));
            let image = match manifest.get(&p.sample_id) {
                Some(r) => Some(manifest.load_image(r)?),
                None => {
                    log::warn!(
                        "sample `{}` is not in the manifest; no crop written",
                        p.sample_id
                    );
                    None
                }
            };
            let crop = match &image {
                Some(img) => Some(match detect_vial(img, detector.as_ref()) {
                    Ok(det) => crop_roi(img, &det.bbox, config.crop_padding)?,
                    Err(_) => img.clone(),
                }),
                None => None,
            };
            if let Some(c) = &crop {
                c.save_png(&out.join(&name))?;
            }
            let predicted = if p.detection_failed {
                "no vial".to_string()
            } else {
                p.predicted.to_string()
            };
            let ce = p.ce_loss.map_or_else(|| "-".into(), |c| format!("{c:.4}"));
            let cell = if crop.is_some() {
                format!("![]({name})")
            } else {
                String::new()
            };
            writeln!(
                md,
                "| {} | {} | {predicted} | {:.4} | {ce} | {cell} |",
                p.sample_id,
                target(p),
                p.probabilities[1]
            )?;
            let img = if crop.is_some() {
                format!("<img src=\"{}\">", escape_html(&name))
            } else {
                String::new()
            };
            writeln!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{predicted}</td><td>{:.4}</td><td>{ce}</td><td>{img}</td></tr>",
                escape_html(&p.sample_id),
                target(p),
                p.probabilities[1]
            )?;
        }
        writeln!(md)?;
        writeln!(html, "</table>")?;
    }
    html.push_str("</body></html>\n");
    fs::write(out.join("report.md"), md)?;
    fs::write(out.join("index.html"), html)?;
    println!("{}", out.join("index.html").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_markup_are_sanitized() {
        assert_eq!(file_stem("a/b c..png"), "a_b_c..png");
        assert_eq!(escape_html("<a&\"b\">"), "&lt;a&amp;&quot;b&quot;&gt;");
    }
}
