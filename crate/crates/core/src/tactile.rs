//! Tactile frames, the threshold-count contact criterion, the 36-token
//! tactile encoder and the contact gate.

use std::io::{Read, Write};

use rand::Rng;
use tacvla_nn::{Graph, Mlp, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};

pub const ROWS: usize = 15;
pub const COLS: usize = 8;
pub const TAXELS: usize = ROWS * COLS;
pub const TOKENS: usize = 36;
pub const GRID: usize = 6;

/// One 15x8 frame of normalized pressures, row-major with row 0 at the fingertip.
#[derive(Clone, Debug, PartialEq)]
pub struct TactileMap {
    values: Vec<f64>,
}

impl TactileMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != TAXELS {
            return Err(CoreError::Config(format!("tactile map needs {TAXELS} values, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Config(format!("taxel value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; TAXELS],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * COLS + col]
    }

    /// Writes `u64` timestamp in milliseconds followed by 120 little-endian `f32`.
    pub fn write_frame<W: Write>(&self, w: &mut W, t_ms: u64) -> std::io::Result<()> {
        w.write_all(&t_ms.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_frame<R: Read>(r: &mut R) -> Result<(u64, Self)> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut raw = [0u8; TAXELS * 4];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((u64::from_le_bytes(b8), Self::new(values)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContactState {
    pub flag: bool,
    pub active_taxels: usize,
}

impl ContactState {
    pub const NONE: ContactState = ContactState {
        flag: false,
        active_taxels: 0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactThresholds {
    pub p_th: f64,
    pub k_th: usize,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self { p_th: 0.1, k_th: 3 }
    }
}

impl ContactThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_th > 0.0 && self.p_th < 1.0) {
            return Err(CoreError::Config(format!("p_th {} not in (0, 1)", self.p_th)));
        }
        if !(1..=TAXELS).contains(&self.k_th) {
            return Err(CoreError::Config(format!("k_th {} not in [1, {TAXELS}]", self.k_th)));
        }
        Ok(())
    }
}

/// `c_t = 1` iff at least `k_th` taxels read strictly above `p_th`.
pub fn detect_contact(map: &TactileMap, p_th: f64, k_th: usize) -> Result<ContactState> {
    ContactThresholds { p_th, k_th }.validate()?;
    let active_taxels = map.values.iter().filter(|&&v| v > p_th).count();
    Ok(ContactState {
        flag: active_taxels >= k_th,
        active_taxels,
    })
}

/// Fixed 2D sine-cosine table for a `grid x grid` layout, one row per cell in
/// row-major order. The first `d/2` channels encode the grid row, the rest the
/// grid column; within each half channels alternate `sin(p w_i)`, `cos(p w_i)`
/// with `w_i = base^(-i / (d/4))`.
pub fn sincos_2d(grid: usize, d: usize, base: f64) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(CoreError::Config(format!("positional width {d} must be a positive multiple of 4")));
    }
    let quarter = d / 4;
    let mut t = Tensor::zeros(&[grid * grid, d]);
    for r in 0..grid {
        for c in 0..grid {
            let row = t.row_mut(r * grid + c);
            for i in 0..quarter {
                let w = base.powf(-(i as f64) / quarter as f64);
                row[2 * i] = (r as f64 * w).sin();
                row[2 * i + 1] = (r as f64 * w).cos();
                row[d / 2 + 2 * i] = (c as f64 * w).sin();
                row[d / 2 + 2 * i + 1] = (c as f64 * w).cos();
            }
        }
    }
    Ok(t)
}

/// Wavelength base for the tactile grid table; chosen so the slowest channel
/// still varies across six cells.
pub const PE_BASE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TactileTokens {
    pub tokens: Tensor,
    pub gate_mask: Vec<bool>,
}

/// `M = c 1`, `z~ = c z`. Gated-off embeddings are written as exact `+0.0`.
pub fn gate_tactile(tokens: &TactileTokens, contact: ContactState) -> TactileTokens {
    let mut out = tokens.clone();
    out.gate_mask = vec![contact.flag; out.gate_mask.len()];
    if !contact.flag {
        out.tokens.data_mut().fill(0.0);
    }
    out
}

/// Two-layer perceptron from the flattened frame to `36 * d` values, reshaped
/// to 36 tokens, plus the fixed grid table added after the projection.
#[derive(Clone, Debug)]
pub struct TactileEncoder {
    pub mlp: Mlp,
    pub pe: Tensor,
    pub dim: usize,
}

pub const ENCODER_PREFIX: &str = "tactile.";

impl TactileEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "tactile.mlp", TAXELS, hidden, TOKENS * dim, rng)?,
            pe: sincos_2d(GRID, dim, PE_BASE)?,
            dim,
        })
    }

    /// `maps` is `(B, 120)`; returns `(B * 36, d)`.
    pub fn forward(&self, g: &mut Graph<'_>, maps: Var) -> Result<Var> {
        let b = g.value(maps).rows();
        let flat = self.mlp.forward(g, maps)?;
        let tok = g.reshape(flat, &[b * TOKENS, self.dim])?;
        let mut pe = Vec::with_capacity(b * TOKENS * self.dim);
        for _ in 0..b {
            pe.extend_from_slice(self.pe.data());
        }
        let pe = g.input(Tensor::new(vec![b * TOKENS, self.dim], pe)?);
        Ok(g.add(tok, pe)?)
    }

    pub fn encode(&self, store: &ParamStore, map: &TactileMap) -> Result<TactileTokens> {
        let mut g = Graph::with_store(store);
        let x = g.input(Tensor::new(vec![1, TAXELS], map.values.clone())?);
        let y = self.forward(&mut g, x)?;
        Ok(TactileTokens {
            tokens: g.value(y).clone(),
            gate_mask: vec![true; TOKENS],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_with(active: &[(usize, f64)]) -> TactileMap {
        let mut v = vec![0.0; TAXELS];
        for &(i, x) in active {
            v[i] = x;
        }
        TactileMap::new(v).unwrap()
    }

    #[test]
    fn zero_map_has_no_contact() {
        for (p, k) in [(0.1, 3), (0.5, 1), (0.01, 120)] {
            assert!(!detect_contact(&TactileMap::zeros(), p, k).unwrap().flag);
        }
    }

    #[test]
    fn saturated_map_counts_everything() {
        let c = detect_contact(&TactileMap::new(vec![1.0; TAXELS]).unwrap(), 0.1, 3).unwrap();
        assert_eq!(c, ContactState { flag: true, active_taxels: 120 });
    }

    #[test]
    fn three_taxels_meet_k3_but_not_k4() {
        let m = map_with(&[(0, 0.5), (17, 0.5), (119, 0.5)]);
        let c3 = detect_contact(&m, 0.1, 3).unwrap();
        assert!(c3.flag);
        assert_eq!(c3.active_taxels, 3);
        assert!(!detect_contact(&m, 0.1, 4).unwrap().flag);
    }

    #[test]
    fn threshold_is_strict() {
        let m = map_with(&[(0, 0.1), (1, 0.1), (2, 0.1)]);
        assert!(!detect_contact(&m, 0.1, 3).unwrap().flag);
    }

    #[test]
    fn bad_thresholds_rejected() {
        let m = TactileMap::zeros();
        assert!(detect_contact(&m, 0.0, 3).is_err());
        assert!(detect_contact(&m, 1.0, 3).is_err());
        assert!(detect_contact(&m, 0.1, 0).is_err());
        assert!(detect_contact(&m, 0.1, 121).is_err());
        assert!(TactileMap::new(vec![1.5; TAXELS]).is_err());
        assert!(TactileMap::new(vec![0.0; 119]).is_err());
    }

    #[test]
    fn neighbouring_cells_differ_only_in_column_half() {
        let d = 16;
        let t = sincos_2d(GRID, d, PE_BASE).unwrap();
        let a = t.row(3 * GRID + 3);
        let b = t.row(3 * GRID + 4);
        assert_eq!(&a[..d / 2], &b[..d / 2]);
        for i in 0..d / 4 {
            let w = PE_BASE.powf(-(i as f64) / (d / 4) as f64);
            assert_eq!(b[d / 2 + 2 * i], (4.0 * w).sin());
            assert_eq!(b[d / 2 + 2 * i + 1], (4.0 * w).cos());
            assert_ne!(a[d / 2 + 2 * i], b[d / 2 + 2 * i]);
        }
    }

    #[test]
    fn zero_map_encodes_to_positional_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = TactileEncoder::new(&mut store, 8, 16, &mut rng).unwrap();
        let t = enc.encode(&store, &TactileMap::zeros()).unwrap();
        assert_eq!(t.tokens.shape(), &[TOKENS, 8]);
        assert_eq!(t.tokens, enc.pe);
        assert!(t.gate_mask.iter().all(|&m| m));
    }

    #[test]
    fn gate_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tok = TactileTokens {
            tokens: Tensor::randn(&[TOKENS, 4], 1.0, &mut rng),
            gate_mask: vec![true; TOKENS],
        };
        let on = gate_tactile(&tok, ContactState { flag: true, active_taxels: 5 });
        assert_eq!(on, tok);
        let off = gate_tactile(&tok, ContactState::NONE);
        assert!(off.tokens.data().iter().all(|v| v.to_bits() == 0));
        assert!(off.gate_mask.iter().all(|&m| !m));
        assert_eq!(off.tokens.shape(), tok.tokens.shape());
    }

    #[test]
    fn frame_round_trip() {
        let m = map_with(&[(3, 0.25), (64, 1.0)]);
        let mut buf = Vec::new();
        m.write_frame(&mut buf, 1200).unwrap();
        assert_eq!(buf.len(), 8 + TAXELS * 4);
        let (t, back) = TactileMap::read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(t, 1200);
        assert_eq!(back, m);
    }
}
