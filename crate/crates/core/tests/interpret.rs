use proptest::prelude::*;
use trafficmoe::interpret::{attention_profile, final_quartile_start, importance_table};
use trafficmoe::tftlite::TftInterpretation;

fn row_normalize(raw: &[f64], rows: usize) -> Vec<f64> {
    let t = raw.len() / rows;
    raw.chunks(t)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |x| x / s)
        })
        .collect()
}

fn interps(raw: &[Vec<f64>], h: usize) -> Vec<TftInterpretation> {
    raw.iter()
        .map(|a| TftInterpretation {
            attention: row_normalize(a, h),
            encoder_weights: vec![0.5, 0.5],
            decoder_weights: vec![1.0],
        })
        .collect()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

#[test]
fn final_quartile_mass_by_hand() {
    let (c, h) = (4, 1);
    let it = TftInterpretation {
        attention: vec![0.1, 0.2, 0.3, 0.4, 0.0],
        encoder_weights: vec![1.0],
        decoder_weights: vec![1.0],
    };
    let p = attention_profile(&[it], c, h).unwrap();
    assert_eq!(final_quartile_start(c), 3);
    assert!((p.final_quartile_mass - 0.4).abs() < 1e-12);

    let it = TftInterpretation {
        attention: vec![0.1, 0.1, 0.1, 0.2, 0.5],
        encoder_weights: vec![1.0],
        decoder_weights: vec![1.0],
    };
    let p = attention_profile(&[it], c, h).unwrap();
    assert!((p.final_quartile_mass - 0.4).abs() < 1e-12);
}

proptest! {
    #[test]
    fn profiles_are_distributions(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 2 * 7), 1..6),
    ) {
        let (c, h) = (5, 2);
        let p = attention_profile(&interps(&raw, h), c, h).unwrap();
        for row in &p.matrix {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!((p.per_position.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.final_quartile_mass >= 0.0 && p.final_quartile_mass <= 1.0 + 1e-12);
    }

    #[test]
    fn profiles_ignore_slice_order(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 2 * 7), 2..6),
        rot in 0usize..6,
    ) {
        let (c, h) = (5, 2);
        let mut shuffled = raw.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let a = attention_profile(&interps(&raw, h), c, h).unwrap();
        let b = attention_profile(&interps(&shuffled, h), c, h).unwrap();
        for (x, y) in a.per_position.iter().zip(&b.per_position) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_sums_to_100_and_ignores_order(
        w in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..8),
    ) {
        let refs: Vec<&[f64]> = w.iter().map(Vec::as_slice).collect();
        let t = importance_table(&names(4), &refs);
        let total: f64 = t.iter().map(|i| i.percent).sum();
        prop_assert!(total == 0.0 || (total - 100.0).abs() < 1e-6);
        prop_assert!(t.iter().all(|i| i.percent >= 0.0));
        let rev: Vec<&[f64]> = refs.iter().rev().copied().collect();
        let r = importance_table(&names(4), &rev);
        for (a, b) in t.iter().zip(&r) {
            prop_assert!((a.percent - b.percent).abs() < 1e-9);
        }
    }
}
