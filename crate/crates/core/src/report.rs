//! Parameter accounting and experiment tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Header, MlpRole};
use crate::engine::EvalResult;
use crate::error::{Error, Result};

/// Column headers of the variant table.
pub const COLUMNS: [&str; 5] = [
    "Variant",
    "Total Params",
    "Non-zero Params",
    "Proxy PPL ↓",
    "Gen Time (s) ↓",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerParams {
    pub total: u64,
    pub nonzero: u64,
    pub branches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Every stored element, scalar gates included.
    pub total: u64,
    /// Elements that are not exactly `0.0`.
    pub nonzero: u64,
    pub per_layer: BTreeMap<usize, LayerParams>,
    /// Number of scalar branch gates stored.
    pub added_gates: u64,
    /// Gate and up projection elements across all MLPs (dense or branch form).
    pub mlp_gate_up_total: u64,
    pub mlp_gate_up_nonzero: u64,
}

impl ParamCount {
    pub fn mlp_gate_up_density(&self) -> f64 {
        self.mlp_gate_up_nonzero as f64 / self.mlp_gate_up_total as f64
    }
}

pub fn count_params(ckpt: &Checkpoint) -> ParamCount {
    let naming = &ckpt.naming;
    let mut count = ParamCount {
        total: 0,
        nonzero: 0,
        per_layer: BTreeMap::new(),
        added_gates: 0,
        mlp_gate_up_total: 0,
        mlp_gate_up_nonzero: 0,
    };
    for (name, t) in &ckpt.tensors {
        let total = t.len() as u64;
        let nonzero = t.nonzero_count() as u64;
        count.total += total;
        count.nonzero += nonzero;

        let role = naming
            .parse_dense(name)
            .map(|(_, r)| r)
            .or_else(|| naming.parse_branch(name).map(|(_, _, r)| r));
        match role {
            Some(MlpRole::Gate | MlpRole::Up) => {
                count.mlp_gate_up_total += total;
                count.mlp_gate_up_nonzero += nonzero;
            }
            Some(MlpRole::Alpha) => count.added_gates += total,
            _ => {}
        }
        if let Some(layer) = naming.parse_layer(name) {
            let entry = count.per_layer.entry(layer).or_default();
            entry.total += total;
            entry.nonzero += nonzero;
            if role == Some(MlpRole::Alpha) {
                entry.branches += 1;
            }
        }
    }
    count
}

/// Total element count straight from a container header, without reading
/// the payload.
pub fn count_header_params(header: &Header) -> u64 {
    header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() as u64)
        .sum()
}

/// One row of the variant table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub params: ParamCount,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub total_params: u64,
    pub nonzero_params: u64,
    pub proxy_ppl: f64,
    pub gen_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn round_to(value: f64, decimals: usize) -> f64 {
    format!("{value:.decimals$}").parse().expect("formatted float parses")
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Builds the variant table. Perplexity is kept to 4 decimals and time to 3,
/// in both renderings.
pub fn emit_report(results: &[VariantResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::arg("a report needs at least one result"));
    }
    let rows = results
        .iter()
        .map(|r| ReportRow {
            variant: r.variant.clone(),
            total_params: r.params.total,
            nonzero_params: r.params.nonzero,
            proxy_ppl: round_to(r.eval.proxy_ppl, 4),
            gen_time_s: round_to(
                r.eval.generation_seconds.unwrap_or(r.eval.wall_clock_seconds),
                3,
            ),
        })
        .collect();
    Ok(Report {
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    thousands(r.total_params),
                    thousands(r.nonzero_params),
                    format!("{:.4}", r.proxy_ppl),
                    format!("{:.3}", r.gen_time_s),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |items: &[String]| {
            let mut s = String::new();
            for (i, (item, w)) in items.iter().zip(&widths).enumerate() {
                let pad = w - item.chars().count();
                if i == 0 {
                    write!(s, "{item}{}", " ".repeat(pad)).unwrap();
                } else {
                    write!(s, "  {}{item}", " ".repeat(pad)).unwrap();
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(variant: &str, total: u64, nonzero: u64, ppl: f64, secs: f64) -> VariantResult {
        VariantResult {
            variant: variant.into(),
            params: ParamCount {
                total,
                nonzero,
                per_layer: BTreeMap::new(),
                added_gates: 0,
                mlp_gate_up_total: 1,
                mlp_gate_up_nonzero: 1,
            },
            eval: EvalResult {
                proxy_ppl: ppl,
                token_count: 10,
                wall_clock_seconds: 0.5,
                tokens_generated: 8,
                generation_seconds: Some(secs),
            },
        }
    }

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(494_033_152), "494,033,152");
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(matches!(emit_report(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn single_row_table() {
        let r = emit_report(&[result("Dense-Original", 100, 100, 1.08334, 1.3)]).unwrap();
        let text = r.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with("Variant"));
    }

    #[test]
    fn three_row_table_uses_variant_columns() {
        let r = emit_report(&[
            result("Dense-Original", 494_032_768, 494_032_768, 1.0833, 1.300),
            result("MLPMoE-All-16", 494_033_152, 494_033_152, 1.0838, 1.633),
            result("MLPMoE-DiffSparsity", 494_033_152, 405_604_020, 1.2233, 1.619),
        ])
        .unwrap();
        assert_eq!(r.columns, COLUMNS.to_vec());
        let text = r.to_text();
        let header = text.lines().next().unwrap();
        for c in COLUMNS {
            assert!(header.contains(c));
        }
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("405,604,020"));
        assert!(text.contains("1.2233"));
    }

    #[test]
    fn json_and_text_agree() {
        let r = emit_report(&[
            result("a", 12_345, 12_000, 3.25, 0.123_456),
            result("b", 7, 7, 256.0, 2.0),
        ])
        .unwrap();
        let json: Report = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let text = r.to_text();
        for (row, line) in json.rows.iter().zip(text.lines().skip(2)) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields[0], row.variant);
            assert_eq!(fields[1].replace(',', "").parse::<u64>().unwrap(), row.total_params);
            assert_eq!(fields[2].replace(',', "").parse::<u64>().unwrap(), row.nonzero_params);
            assert_eq!(fields[3].parse::<f64>().unwrap(), row.proxy_ppl);
            assert_eq!(fields[4].parse::<f64>().unwrap(), row.gen_time_s);
        }
    }
}
