//! Result tables, histogram CSVs and the speaker-filter audit trail.

use sgsp_core::evaluation::{EvalReport, Histogram};
use sgsp_core::world::SpeakerWorld;

use crate::RunError;

/// Column layout of a results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Content error and SSIM per side, then AUC.
    SingleSpeaker,
    /// SSIM per side, AUC, then Avg/Max FSSIM.
    MultiSpeaker,
}

impl Layout {
    pub fn for_setting(n_forget: usize) -> Self {
        if n_forget == 1 {
            Layout::SingleSpeaker
        } else {
            Layout::MultiSpeaker
        }
    }

    pub fn headers(self) -> &'static [&'static str] {
        match self {
            Layout::SingleSpeaker => &["method", "content_err_r", "content_err_f", "ssim_r", "ssim_f", "auc"],
            Layout::MultiSpeaker => &["method", "ssim_r", "ssim_f", "auc", "avg_fssim", "max_fssim"],
        }
    }

    fn values(self, r: &EvalReport) -> [f64; 5] {
        match self {
            Layout::SingleSpeaker => {
                [r.content_err_retain, r.content_err_forget, r.ssim_retain_mean, r.ssim_forget_mean, r.auc]
            }
            Layout::MultiSpeaker => [r.ssim_retain_mean, r.ssim_forget_mean, r.auc, r.avg_fssim, r.max_fssim],
        }
    }
}

fn csv_bytes<F>(fill: F) -> Result<String, RunError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w).map_err(|e| RunError::Artifact(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| RunError::Artifact(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Full-precision CSV, one row per report in the given order.
pub fn table_csv(layout: Layout, reports: &[EvalReport]) -> Result<String, RunError> {
    csv_bytes(|w| {
        w.write_record(layout.headers())?;
        for r in reports {
            let mut row = vec![r.label.clone()];
            row.extend(layout.values(r).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Aligned text table with three decimals (four for content error).
pub fn table_text(title: &str, layout: Layout, reports: &[EvalReport]) -> String {
    let headers = layout.headers();
    let mut rows: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
    for r in reports {
        let mut row = vec![r.label.clone()];
        for (i, v) in layout.values(r).iter().enumerate() {
            let content_col = layout == Layout::SingleSpeaker && i < 2;
            row.push(if content_col { format!("{v:.4}") } else { format!("{v:.3}") });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..headers.len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap()).collect();
    let mut out = format!("{title}\n");
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Every metric of every row, for all settings in one file.
pub fn summary_csv(reports: &[EvalReport]) -> Result<String, RunError> {
    csv_bytes(|w| {
        w.write_record([
            "n_forget",
            "method",
            "filter",
            "content_err_r",
            "content_err_f",
            "ssim_r",
            "ssim_f",
            "auc",
            "avg_fssim",
            "max_fssim",
        ])?;
        for r in reports {
            w.write_record([
                r.n_forget.to_string(),
                r.label.clone(),
                format!("{:?}", r.filter).to_lowercase(),
                r.content_err_retain.to_string(),
                r.content_err_forget.to_string(),
                r.ssim_retain_mean.to_string(),
                r.ssim_forget_mean.to_string(),
                r.auc.to_string(),
                r.avg_fssim.to_string(),
                r.max_fssim.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn histogram_csv(h: &Histogram) -> Result<String, RunError> {
    csv_bytes(|w| {
        w.write_record(["bin_left", "bin_right", "retain_count", "forget_count"])?;
        for b in &h.bins {
            w.write_record([b.left.to_string(), b.right.to_string(), b.retain.to_string(), b.forget.to_string()])?;
        }
        Ok(())
    })
}

/// One row per eval pair: filter verdict, attempts and the speaker finally used.
pub fn audit_csv(report: &EvalReport, world: &SpeakerWorld) -> Result<String, RunError> {
    csv_bytes(|w| {
        w.write_record(["side", "pair_index", "classified_forget", "attempts", "final_speaker_id"])?;
        for s in &report.samples {
            let side = match s.side {
                sgsp_core::evaluation::Side::Retain => "retain",
                sgsp_core::evaluation::Side::Forget => "forget",
            };
            w.write_record([
                side.to_string(),
                s.pair_index.to_string(),
                s.decision.classified_forget.to_string(),
                s.decision.attempts.to_string(),
                world.utterances[s.effective_reference].speaker_id.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// File-name slug for a method label: `EGP+Trip.` becomes `egp-trip`.
pub fn slug(label: &str) -> String {
    let mut s: String = label
        .chars()
        .filter_map(|c| match c {
            '+' | ' ' => Some('-'),
            '.' => None,
            c => Some(c.to_ascii_lowercase()),
        })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("EGP+Trip."), "egp-trip");
        assert_eq!(slug("PT + GTF"), "pt-gtf");
        assert_eq!(slug("PT"), "pt");
    }

    #[test]
    fn layouts_match_setting() {
        assert!(!Layout::for_setting(1).headers().contains(&"max_fssim"));
        assert!(Layout::for_setting(15).headers().contains(&"avg_fssim"));
        assert!(Layout::for_setting(100).headers().contains(&"max_fssim"));
    }
}
