//! Closed-form per-block FLOP counts for the DiffuSSM block and a DiT
//! transformer block, and the sweep table comparing them.

use crate::block::block_flops_formula;
use crate::error::{Error, Result};
use std::fmt::Write;

/// Architecture whose per-block FLOPs are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Diffussm,
    Dit,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffussm" => Ok(Arch::Diffussm),
            "dit" => Ok(Arch::Dit),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (expected diffussm or dit)"
            ))),
        }
    }
}

/// Per-block FLOPs at sequence length `l` and width `d`. `factor` is the
/// hourglass ratio M for DiffuSSM and the patch size p for DiT; `alpha`
/// scales the FFT term and is ignored for DiT.
pub fn flops_compare(arch: Arch, l: f64, d: f64, factor: f64, alpha: f64) -> Result<f64> {
    if !(l > 0.0 && d > 0.0 && factor > 0.0 && alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "flops_compare needs positive arguments, got L={l} D={d} factor={factor} alpha={alpha}"
        )));
    }
    Ok(match arch {
        Arch::Diffussm => block_flops_formula(l, d, factor, alpha),
        Arch::Dit => {
            let lp = l / (factor * factor);
            12.0 * lp * d * d + 2.0 * d * lp * lp
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsRow {
    pub l: usize,
    pub dit_p1: f64,
    pub dit_p2: f64,
    pub diffussm_m1: f64,
    pub diffussm_m2: f64,
}

/// Powers of two from 256 to 16384.
pub fn default_lengths() -> Vec<usize> {
    (8..=14).map(|k| 1usize << k).collect()
}

pub fn flops_sweep(lengths: &[usize], d: usize, alpha: f64) -> Result<Vec<FlopsRow>> {
    let d = d as f64;
    lengths
        .iter()
        .map(|&l| {
            let lf = l as f64;
            Ok(FlopsRow {
                l,
                dit_p1: flops_compare(Arch::Dit, lf, d, 1.0, alpha)?,
                dit_p2: flops_compare(Arch::Dit, lf, d, 2.0, alpha)?,
                diffussm_m1: flops_compare(Arch::Diffussm, lf, d, 1.0, alpha)?,
                diffussm_m2: flops_compare(Arch::Diffussm, lf, d, 2.0, alpha)?,
            })
        })
        .collect()
}

pub fn flops_csv(rows: &[FlopsRow]) -> String {
    let mut out = String::from("L,dit_p1,dit_p2,diffussm_m1,diffussm_m2\n");
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            r.l, r.dit_p1, r.dit_p2, r.diffussm_m1, r.diffussm_m2
        )
        .unwrap();
    }
    out
}

/// Smallest swept L from which `ours < theirs` holds for every longer L.
pub fn crossover(rows: &[FlopsRow], theirs: impl Fn(&FlopsRow) -> f64) -> Option<usize> {
    let mut from = None;
    for r in rows.iter().rev() {
        if r.diffussm_m2 < theirs(r) {
            from = Some(r.l);
        } else {
            break;
        }
    }
    from
}

pub fn flops_summary(rows: &[FlopsRow], d: usize) -> String {
    let describe = |name: &str, c: Option<usize>| match (c, rows.first()) {
        (Some(l), Some(first)) if l == first.l => {
            format!("diffussm_m2 < {name} at every swept L (from L={l}) for D={d}")
        }
        (Some(l), _) => format!("diffussm_m2 < {name} for L >= {l} at D={d}"),
        (None, _) => format!("diffussm_m2 does not drop below {name} in the swept range at D={d}"),
    };
    let mut s = describe("dit_p1", crossover(rows, |r| r.dit_p1));
    s.push('\n');
    s.push_str(&describe("dit_p2", crossover(rows, |r| r.dit_p2)));
    s.push('\n');
    if rows.len() >= 2 {
        let (a, b) = (&rows[rows.len() - 2], &rows[rows.len() - 1]);
        let lr = b.l as f64 / a.l as f64;
        writeln!(
            s,
            "growth from L={} to L={}: dit_p1 x{:.3}, diffussm_m2 x{:.3} (linear would be x{lr:.3})",
            a.l,
            b.l,
            b.dit_p1 / a.dit_p1,
            b.diffussm_m2 / a.diffussm_m2
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_arch_rejected() {
        assert!("mamba".parse::<Arch>().is_err());
        assert_eq!("dit".parse::<Arch>().unwrap(), Arch::Dit);
    }

    #[test]
    fn nonpositive_arguments_rejected() {
        assert!(flops_compare(Arch::Dit, 0.0, 8.0, 1.0, 1.0).is_err());
        assert!(flops_compare(Arch::Diffussm, 8.0, 8.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn m2_near_seven_and_a_half_ld2() {
        let d = 1152usize;
        for l in [1024usize, 2048, 4096, 8192, 16384] {
            let f = flops_compare(Arch::Diffussm, l as f64, d as f64, 2.0, 1.0).unwrap();
            let target = 7.5 * l as f64 * (d * d) as f64;
            assert!((f / target - 1.0).abs() < 0.05, "L={l} ratio {}", f / target);
        }
    }

    #[test]
    fn dit_p1_super_linear() {
        let a = flops_compare(Arch::Dit, 2048.0, 1024.0, 1.0, 1.0).unwrap();
        let b = flops_compare(Arch::Dit, 4096.0, 1024.0, 1.0, 1.0).unwrap();
        assert!(b / a > 2.0);
    }

    #[test]
    fn dit_matches_hand_evaluation() {
        // L'=4, D=3: 12·4·9 + 2·3·16
        assert_eq!(flops_compare(Arch::Dit, 16.0, 3.0, 2.0, 1.0).unwrap(), 432.0 + 96.0);
    }

    #[test]
    fn sweep_positive_and_monotone() {
        let rows = flops_sweep(&default_lengths(), 1024, 1.0).unwrap();
        for r in &rows {
            for v in [r.dit_p1, r.dit_p2, r.diffussm_m1, r.diffussm_m2] {
                assert!(v > 0.0);
            }
        }
        for w in rows.windows(2) {
            assert!(w[1].dit_p1 > w[0].dit_p1);
            assert!(w[1].dit_p2 > w[0].dit_p2);
            assert!(w[1].diffussm_m1 > w[0].diffussm_m1);
            assert!(w[1].diffussm_m2 > w[0].diffussm_m2);
        }
    }

    #[test]
    fn crossover_and_csv() {
        let rows = flops_sweep(&default_lengths(), 1024, 1.0).unwrap();
        assert_eq!(crossover(&rows, |r| r.dit_p1), Some(256));
        let csv = flops_csv(&rows);
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert!(csv.starts_with("L,dit_p1,dit_p2,diffussm_m1,diffussm_m2\n"));
        let summary = flops_summary(&rows, 1024);
        assert!(summary.contains("dit_p1"));
    }

    #[test]
    fn crossover_requires_tail() {
        let mk = |l, m2, p1| FlopsRow {
            l,
            dit_p1: p1,
            dit_p2: p1,
            diffussm_m1: m2,
            diffussm_m2: m2,
        };
        let rows = [mk(1, 1.0, 2.0), mk(2, 3.0, 2.0), mk(4, 1.0, 5.0), mk(8, 1.0, 9.0)];
        assert_eq!(crossover(&rows, |r| r.dit_p1), Some(4));
        assert_eq!(crossover(&rows[..2], |r| r.dit_p1), None);
    }
}
