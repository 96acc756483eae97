//! Stored domain anchors: recomputation is bit-exact and distinct kinds are
//! well separated relative to their Monte-Carlo standard error.
//!
//! Set `DEXP_BLESS=1` to rewrite the fixture.

use dexp::numerics::{norm, Rng};
use dexp::scene::{anchor, read_anchors, render, write_anchors, DomainKind, EmbeddingSpace, FactorPrior};
use std::path::PathBuf;

const SAMPLES: usize = 256;
const POINTS: usize = 32;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/anchors.json")
}

fn samples(space: &EmbeddingSpace, kind: DomainKind, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let prior = FactorPrior::default();
    (0..SAMPLES)
        .map(|_| space.embed(&render(kind, &prior.sample(&mut rng), POINTS).unwrap()).unwrap())
        .collect()
}

/// Standard error of the gap between two anchors drawn with the same seed:
/// `sqrt(Σ_f var_f(d) / n)` over the paired per-sample differences `d`.
fn gap_standard_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d: Vec<Vec<f64>> = a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect();
    let n = d.len() as f64;
    let var: f64 = (0..d[0].len())
        .map(|f| {
            let mean = d.iter().map(|e| e[f]).sum::<f64>() / n;
            d.iter().map(|e| (e[f] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum();
    (var / n).sqrt()
}

#[test]
fn anchors_match_fixture_and_separate() {
    let space = EmbeddingSpace::default();
    let anchors: Vec<_> = DomainKind::ALL.iter().map(|&k| anchor(&space, k, SAMPLES, 0, POINTS).unwrap()).collect();
    if std::env::var_os("DEXP_BLESS").is_some() {
        write_anchors(&fixture(), &anchors).unwrap();
    }
    let stored = read_anchors(&fixture()).expect("fixture present; run with DEXP_BLESS=1");
    assert_eq!(stored.len(), anchors.len());
    for (a, b) in stored.iter().zip(&anchors) {
        assert_eq!(a.kind, b.kind);
        assert!(a.anchor.iter().zip(&b.anchor).all(|(x, y)| x.to_bits() == y.to_bits()), "{:?} drifted", a.kind);
    }

    let draws: Vec<Vec<Vec<f64>>> = DomainKind::ALL.iter().map(|&k| samples(&space, k, 0)).collect();
    for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            let gap: Vec<f64> = anchors[i].anchor.iter().zip(&anchors[j].anchor).map(|(a, b)| a - b).collect();
            let bound = 10.0 * gap_standard_error(&draws[i], &draws[j]);
            assert!(
                norm(&gap) >= bound,
                "{:?} and {:?} are {:.4} apart, need {bound:.4}",
                anchors[i].kind,
                anchors[j].kind,
                norm(&gap)
            );
        }
    }
}
