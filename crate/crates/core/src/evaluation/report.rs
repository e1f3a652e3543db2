use serde::{Deserialize, Serialize};

use super::ap::ApMode;

/// Column header of every results table.
pub const TABLE_COLUMNS: [&str; 6] = ["Echinus", "Starfish", "Holoth.", "Scallop", "Waterweed", "mAP"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// Five class APs then mAP, as fractions. `None` marks a failed run.
    pub values: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub title: String,
    pub ap_mode: ApMode,
    pub iou_threshold: f64,
    /// `cooperative` or `adversarial` for tables whose rows train the domain branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_training: Option<String>,
    /// `original` or `augmented`: which images the rows were scored on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<String>,
    pub rows: Vec<TableRow>,
}

/// Percent with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl ResultsTable {
    /// Column maxima over the printed (rounded) values, failed rows skipped.
    pub fn column_maxima(&self) -> [Option<String>; 6] {
        std::array::from_fn(|c| {
            self.rows
                .iter()
                .filter_map(|r| r.values.map(|v| v[c] * 100.0))
                .map(|v| format!("{v:.2}"))
                .max_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("Model");
        for c in TABLE_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_field(&r.label));
            match r.values {
                Some(v) => {
                    for x in v {
                        out.push(',');
                        out.push_str(&percent(x));
                    }
                }
                None => out.push_str(&",failed".repeat(6)),
            }
            out.push('\n');
        }
        out
    }

    /// Pipe table with the column maxima in bold.
    pub fn to_markdown(&self) -> String {
        let maxima = self.column_maxima();
        let mut out = format!("### {}\n\n| Model |", self.title);
        for c in TABLE_COLUMNS {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(6));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} |", r.label));
            match r.values {
                Some(v) => {
                    for (c, x) in v.iter().enumerate() {
                        let s = percent(*x);
                        if maxima[c].as_deref() == Some(s.as_str()) {
                            out.push_str(&format!(" **{s}** |"));
                        } else {
                            out.push_str(&format!(" {s} |"));
                        }
                    }
                }
                None => out.push_str(&" failed |".repeat(6)),
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\nAP at IoU {}, {}.",
            self.iou_threshold,
            self.ap_mode.describe()
        ));
        if let Some(m) = &self.domain_training {
            out.push_str(&format!(" Domain branch trained {m}."));
        }
        if let Some(v) = &self.validation {
            out.push_str(&format!(" Scored on {v} validation images."));
        }
        out.push('\n');
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
