//! Attention profiles and variable importance aggregated over test slices,
//! reported per condition. Each expert is interpreted on the slices its
//! condition routes to it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::FeatureTensor;
use crate::moe::MoeModel;
use crate::tftlite::{TftConfig, TftInterpretation, TftModel};
use crate::windows::{filter_condition, Condition, WindowSlice};
use crate::{util, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub c: usize,
    pub h: usize,
    /// `h x (c + h)` mean attention, each row normalized to sum to one.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over prediction steps of `matrix`, one entry per position.
    pub per_position: Vec<f64>,
    /// Share of the context-window attention in `per_position` that falls on
    /// the last quarter of the context.
    pub final_quartile_mass: f64,
}

/// First context position of the final quartile.
pub fn final_quartile_start(c: usize) -> usize {
    c - c.div_ceil(4)
}

/// Mean attention over slices; `None` for no slices.
pub fn attention_profile(interps: &[TftInterpretation], c: usize, h: usize) -> Option<AttentionProfile> {
    if interps.is_empty() {
        return None;
    }
    let t = c + h;
    let mut matrix = vec![vec![0.0; t]; h];
    for it in interps {
        for (j, row) in matrix.iter_mut().enumerate() {
            for (acc, &w) in row.iter_mut().zip(&it.attention[j * t..(j + 1) * t]) {
                *acc += w;
            }
        }
    }
    for row in &mut matrix {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    let per_position: Vec<f64> = (0..t)
        .map(|k| matrix.iter().map(|row| row[k]).sum::<f64>() / h as f64)
        .collect();
    let context: f64 = per_position[..c].iter().sum();
    let tail: f64 = per_position[final_quartile_start(c)..c].iter().sum();
    let final_quartile_mass = if context > 0.0 { tail / context } else { 0.0 };
    Some(AttentionProfile { c, h, matrix, per_position, final_quartile_mass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub variable: String,
    pub percent: f64,
}

/// Mean selection weight per variable as percentages summing to 100.
pub fn importance_table(names: &[String], weights: &[&[f64]]) -> Vec<Importance> {
    let mut mean = vec![0.0; names.len()];
    for w in weights {
        for (m, &x) in mean.iter_mut().zip(*w) {
            *m += x;
        }
    }
    let total: f64 = mean.iter().sum();
    names
        .iter()
        .zip(mean)
        .map(|(n, m)| Importance {
            variable: n.clone(),
            percent: if total > 0.0 { 100.0 * m / total } else { 0.0 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableImportance {
    /// Observed-past (target included) and known-future inputs of the encoder.
    pub encoder: Vec<Importance>,
    /// Known-future inputs of the decoder.
    pub decoder: Vec<Importance>,
}

impl VariableImportance {
    pub fn get(table: &[Importance], variable: &str) -> Option<f64> {
        table.iter().find(|i| i.variable == variable).map(|i| i.percent)
    }
}

pub fn variable_importance(cfg: &TftConfig, interps: &[TftInterpretation]) -> Option<VariableImportance> {
    if interps.is_empty() {
        return None;
    }
    let enc_names: Vec<String> = cfg.encoder_vars().iter().map(|v| v.name.clone()).collect();
    let dec_names: Vec<String> = cfg.known.iter().map(|v| v.name.clone()).collect();
    let enc: Vec<&[f64]> = interps.iter().map(|i| i.encoder_weights.as_slice()).collect();
    let dec: Vec<&[f64]> = interps.iter().map(|i| i.decoder_weights.as_slice()).collect();
    Some(VariableImportance {
        encoder: importance_table(&enc_names, &enc),
        decoder: importance_table(&dec_names, &dec),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInterpretation {
    pub condition: Condition,
    pub expert: String,
    pub slices: usize,
    pub attention: Option<AttentionProfile>,
    pub importance: Option<VariableImportance>,
}

pub fn interpret_expert(
    model: &TftModel,
    expert: &str,
    ft: &FeatureTensor,
    slices: &[WindowSlice],
    condition: Condition,
) -> Result<ConditionInterpretation> {
    let sub = filter_condition(slices, condition);
    let interps: Vec<TftInterpretation> = model.forecast(ft, &sub)?.into_iter().map(|(_, i)| i).collect();
    let cfg = model.config();
    Ok(ConditionInterpretation {
        condition,
        expert: expert.to_string(),
        slices: sub.len(),
        attention: attention_profile(&interps, cfg.c, cfg.h),
        importance: variable_importance(cfg, &interps),
    })
}

/// Recurrent expert on recurrent slices, non-recurrent expert on
/// non-recurrent slices.
pub fn interpret_moe(moe: &MoeModel, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<[ConditionInterpretation; 2]> {
    Ok([
        interpret_expert(&moe.recurrent, "recurrent", ft, slices, Condition::Recurrent)?,
        interpret_expert(&moe.nonrecurrent, "nonrecurrent", ft, slices, Condition::NonRecurrent)?,
    ])
}

pub const AVERAGING_NOTE: &str =
    "attention is head-averaged, then averaged over slices and prediction steps; rows renormalized";

impl ConditionInterpretation {
    pub fn attention_csv(&self) -> Option<String> {
        let a = self.attention.as_ref()?;
        let mut s = String::from("step");
        for k in 0..a.c + a.h {
            let _ = write!(s, ",{}", position_label(k, a.c));
        }
        s.push('\n');
        for (j, row) in a.matrix.iter().enumerate() {
            let _ = write!(s, "{}", j + 1);
            for w in row {
                let _ = write!(s, ",{w:.8}");
            }
            s.push('\n');
        }
        s.push_str("mean");
        for w in &a.per_position {
            let _ = write!(s, ",{w:.8}");
        }
        s.push('\n');
        Some(s)
    }

    pub fn importance_csv(&self) -> Option<String> {
        let imp = self.importance.as_ref()?;
        let mut s = String::from("table,variable,percent\n");
        for (table, rows) in [("encoder", &imp.encoder), ("decoder", &imp.decoder)] {
            for r in rows {
                let _ = writeln!(s, "{table},{},{:.6}", r.variable, r.percent);
            }
        }
        Some(s)
    }

    /// Writes `attention_<condition>.csv` and `importance_<condition>.csv`
    /// (skipped when the condition has no slices).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let cond = self.condition.as_str();
        if let Some(a) = self.attention_csv() {
            util::write(&dir.join(format!("attention_{cond}.csv")), a)?;
        }
        if let Some(i) = self.importance_csv() {
            util::write(&dir.join(format!("importance_{cond}.csv")), i)?;
        }
        Ok(())
    }
}

/// Column label of attention position `k`: `t-<lag>` for context, `t+<k>` for predictions.
pub fn position_label(k: usize, c: usize) -> String {
    if k < c {
        format!("t-{}", c - k)
    } else {
        format!("t+{}", k - c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interp(attention: Vec<f64>) -> TftInterpretation {
        TftInterpretation {
            attention,
            encoder_weights: vec![0.25, 0.75],
            decoder_weights: vec![1.0],
        }
    }

    #[test]
    fn profile_rows_are_distributions() {
        // c = 2, h = 1
        let a = attention_profile(&[interp(vec![0.2, 0.8, 0.0]), interp(vec![0.6, 0.4, 0.0])], 2, 1).unwrap();
        assert!((a.matrix[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((a.per_position[0] - 0.4).abs() < 1e-12);
        assert!((a.final_quartile_mass - 0.6).abs() < 1e-12);
        assert!(attention_profile(&[], 2, 1).is_none());
        let b = attention_profile(&[interp(vec![0.1, 0.4, 0.5])], 2, 1).unwrap();
        assert!((b.final_quartile_mass - 0.8).abs() < 1e-12);
    }

    #[test]
    fn quartile_start() {
        assert_eq!(final_quartile_start(12), 9);
        assert_eq!(final_quartile_start(4), 3);
        assert_eq!(final_quartile_start(2), 1);
    }

    #[test]
    fn importance_sums_to_100() {
        let names = vec!["a".to_string(), "b".to_string()];
        let t = importance_table(&names, &[&[0.25, 0.75], &[0.75, 0.25]]);
        assert!((t.iter().map(|i| i.percent).sum::<f64>() - 100.0).abs() < 1e-9);
        assert!((t[0].percent - 50.0).abs() < 1e-9);
    }

    #[test]
    fn labels() {
        assert_eq!(position_label(0, 12), "t-12");
        assert_eq!(position_label(11, 12), "t-1");
        assert_eq!(position_label(12, 12), "t+0");
    }
}
