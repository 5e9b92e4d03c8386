//! Affine disturbance-feedback policies and their on-disk form.
//!
//! A policy is a gain matrix `Q` mapping the lifted disturbance vector
//! (leading constant, then one three-component block per bus per period)
//! to the input trajectory: `u = Q xi`. Column 0 is the nominal plan;
//! the remaining columns are feedback corrections. Decentralized
//! causality restricts each input row to its own bus's disturbances up
//! to the current period.
//!
//! The text format stores nonzero entries with Rust's shortest
//! round-trip float formatting, so save/load reproduces every gain
//! bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::assembly::build_policy_mask;
use crate::error::{Error, Result};
use crate::layout::{Dims, InputKind, XiKind};

#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub dims: Dims,
    /// `2nT x (1 + 3nT)` gain matrix.
    pub gains: DMatrix<f64>,
}

impl AffinePolicy {
    pub fn new(dims: Dims, gains: DMatrix<f64>) -> Result<AffinePolicy> {
        if gains.nrows() != dims.n_u() || gains.ncols() != dims.n_xi() {
            return Err(Error::Dimension(format!(
                "policy gains must be {}x{}, got {}x{}",
                dims.n_u(),
                dims.n_xi(),
                gains.nrows(),
                gains.ncols()
            )));
        }
        if gains.iter().any(|v| !v.is_finite()) {
            return Err(Error::PolicyFormat("policy contains non-finite gains".into()));
        }
        Ok(AffinePolicy { dims, gains })
    }

    /// All-zero policy (every input held at zero regardless of the
    /// disturbance).
    pub fn zero(dims: Dims) -> AffinePolicy {
        AffinePolicy { dims, gains: DMatrix::zeros(dims.n_u(), dims.n_xi()) }
    }

    /// Input trajectory for one disturbance realization.
    pub fn inputs(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.gains * xi
    }

    /// First gain that violates the decentralized-causality pattern, if
    /// any: `(input row, disturbance column)`.
    pub fn causality_violation(&self) -> Option<(usize, usize)> {
        let mask = build_policy_mask(self.dims);
        for row in 0..self.dims.n_u() {
            for col in 0..self.dims.n_xi() {
                if self.gains[(row, col)] != 0.0 && !mask[(row, col)] {
                    return Some((row, col));
                }
            }
        }
        None
    }

    /// Gain from disturbance `(s, bus_from, kind)` to input
    /// `(t, bus_to, input)`.
    pub fn gain(
        &self,
        t: usize,
        bus_to: usize,
        input: InputKind,
        s: usize,
        bus_from: usize,
        kind: XiKind,
    ) -> f64 {
        self.gains[(
            self.dims.u_index(t, bus_to, input),
            self.dims.xi_index(s, bus_from, kind),
        )]
    }

    /// Nominal (disturbance-independent) input at `(t, bus, kind)`.
    pub fn nominal(&self, t: usize, bus: usize, input: InputKind) -> f64 {
        self.gains[(self.dims.u_index(t, bus, input), 0)]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let mut entries = Vec::new();
        for col in 0..self.dims.n_xi() {
            for row in 0..self.dims.n_u() {
                let v = self.gains[(row, col)];
                if v != 0.0 {
                    entries.push((row, col, v));
                }
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let _ = writeln!(out, "affine-policy v1");
        let _ = writeln!(out, "buses {}", self.dims.n);
        let _ = writeln!(out, "periods {}", self.dims.horizon);
        let _ = writeln!(out, "entries {}", entries.len());
        for (r, c, v) in entries {
            let _ = writeln!(out, "{r} {c} {v}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AffinePolicy> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "affine-policy v1" {
            return Err(Error::PolicyFormat(format!(
                "unrecognized header {header:?}; expected \"affine-policy v1\""
            )));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines
                .next()
                .ok_or_else(|| Error::PolicyFormat(format!("missing `{name}` line")))?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(key), Some(value), None) if key == name => value
                    .parse()
                    .map_err(|_| Error::PolicyFormat(format!("bad `{name}` value {value:?}"))),
                _ => Err(Error::PolicyFormat(format!("malformed `{name}` line {line:?}"))),
            }
        };
        let n = field("buses")?;
        let horizon = field("periods")?;
        let count = field("entries")?;
        if n == 0 || horizon == 0 {
            return Err(Error::PolicyFormat("policy must cover at least one bus and period".into()));
        }
        let dims = Dims::new(n, horizon);
        let mut gains = DMatrix::zeros(dims.n_u(), dims.n_xi());
        let mut seen = 0usize;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(r), Some(c), Some(v), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::PolicyFormat(format!("malformed entry line {line:?}")));
            };
            let r: usize =
                r.parse().map_err(|_| Error::PolicyFormat(format!("bad row {r:?}")))?;
            let c: usize =
                c.parse().map_err(|_| Error::PolicyFormat(format!("bad column {c:?}")))?;
            let v: f64 =
                v.parse().map_err(|_| Error::PolicyFormat(format!("bad value {v:?}")))?;
            if r >= dims.n_u() || c >= dims.n_xi() {
                return Err(Error::PolicyFormat(format!(
                    "entry ({r}, {c}) outside a {}x{} policy",
                    dims.n_u(),
                    dims.n_xi()
                )));
            }
            gains[(r, c)] = v;
            seen += 1;
        }
        if seen != count {
            return Err(Error::PolicyFormat(format!(
                "header promises {count} entries, file carries {seen}"
            )));
        }
        let policy = AffinePolicy::new(dims, gains)?;
        if let Some((row, col)) = policy.causality_violation() {
            return Err(Error::PolicyFormat(format!(
                "gain at ({row}, {col}) violates decentralized causality"
            )));
        }
        Ok(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_masked_policy(dims: Dims, seed: u64) -> AffinePolicy {
        let mask = build_policy_mask(dims);
        let mut rng = crate::scenario::stream_rng(seed, 0);
        let mut gains = DMatrix::zeros(dims.n_u(), dims.n_xi());
        for r in 0..dims.n_u() {
            for c in 0..dims.n_xi() {
                if mask[(r, c)] && rng.gen_bool(0.7) {
                    // Bit-exactness matters, so use awkward values.
                    gains[(r, c)] = rng.gen_range(-1.0..1.0) / 3.0;
                }
            }
        }
        AffinePolicy::new(dims, gains).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("derflow-policy-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.policy");
        let policy = random_masked_policy(Dims::new(3, 4), 11);
        policy.save(&path).unwrap();
        let loaded = AffinePolicy::load(&path).unwrap();
        assert_eq!(policy.dims, loaded.dims);
        assert_eq!(policy.gains, loaded.gains, "round trip must be exact");
    }

    #[test]
    fn load_rejects_acausal_gains() {
        let dir = std::env::temp_dir().join("derflow-policy-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("acausal.policy");
        let dims = Dims::new(2, 2);
        // Gain from the other bus's disturbance.
        let bad_col = dims.xi_index(0, 2, XiKind::LoadActive);
        let text = format!("affine-policy v1\nbuses 2\nperiods 2\nentries 1\n0 {bad_col} 0.5\n");
        std::fs::write(&path, text).unwrap();
        match AffinePolicy::load(&path) {
            Err(Error::PolicyFormat(msg)) => assert!(msg.contains("causality")),
            other => panic!("expected causality rejection, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_wrong_counts_and_headers() {
        let dir = std::env::temp_dir().join("derflow-policy-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badcount.policy");
        std::fs::write(&path, "affine-policy v1\nbuses 1\nperiods 1\nentries 2\n0 0 1.0\n")
            .unwrap();
        assert!(matches!(AffinePolicy::load(&path), Err(Error::PolicyFormat(_))));
        std::fs::write(&path, "something else\n").unwrap();
        assert!(matches!(AffinePolicy::load(&path), Err(Error::PolicyFormat(_))));
    }

    #[test]
    fn zero_policy_is_causal() {
        assert!(AffinePolicy::zero(Dims::new(3, 3)).causality_violation().is_none());
    }
}
