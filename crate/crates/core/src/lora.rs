//! Low-rank adapters attached to frozen linear weights.
//!
//! A layer computes `h = W₀x + (α/r)·B(Ax)` with `W₀` (d×k) frozen,
//! `A` (r×k) trainable and Gaussian-initialized, `B` (d×r) trainable and
//! zero-initialized. Setting `α = r` gives the unscaled form `W₀x + BAx`.
//!
//! # Serialization
//!
//! [`LoraAdapter::to_text`] writes a line-oriented text format:
//!
//! ```text
//! ortho-lora-adapter 1
//! <d> <k> <r> <alpha>
//! a <r·k entries, row-major>
//! b <d·r entries, row-major>
//! ```
//!
//! Numbers are written in Rust's shortest round-trip exponent form (`{:e}`),
//! so parsing the text reproduces every `f64` bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::dense::{Matrix, Rng};
use crate::error::{Error, Result};

pub const ADAPTER_FORMAT_HEADER: &str = "ortho-lora-adapter 1";

/// Default standard deviation for initializing `A`.
pub const DEFAULT_SIGMA: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter for a `d×k` weight: `A ~ N(0, sigma²)`, `B = 0`.
    pub fn init(d: usize, k: usize, rank: usize, sigma: f64, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::param(format!("layer dims must be positive, got {d}x{k}")));
        }
        if rank == 0 || rank > d.min(k) {
            return Err(Error::param(format!(
                "rank {rank} outside 1..={} for a {d}x{k} layer",
                d.min(k)
            )));
        }
        check_alpha(alpha)?;
        let a = Matrix::gaussian(rank, k, sigma, rng)?;
        Ok(Self {
            a,
            b: Matrix::zeros(d, rank),
            alpha,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Shape {
                op: "adapter (A rows vs B cols)",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let (rank, d, k) = (a.rows(), b.rows(), a.cols());
        if rank > d.min(k) {
            return Err(Error::param(format!(
                "rank {rank} outside 1..={} for a {d}x{k} layer",
                d.min(k)
            )));
        }
        check_alpha(alpha)?;
        Ok(Self { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// The `α/r` factor applied to `BA`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `ΔW = (α/r)·BA`.
    pub fn delta_weight(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter invariant: B cols = A rows")
            .scale(self.scale())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{ADAPTER_FORMAT_HEADER}").unwrap();
        writeln!(
            out,
            "{} {} {} {:e}",
            self.out_dim(),
            self.in_dim(),
            self.rank(),
            self.alpha
        )
        .unwrap();
        for (tag, m) in [("a", &self.a), ("b", &self.b)] {
            out.push_str(tag);
            for v in m.data() {
                write!(out, " {v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format { what: "adapter", msg };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == ADAPTER_FORMAT_HEADER => {}
            other => return Err(bad(format!("expected header `{ADAPTER_FORMAT_HEADER}`, got {other:?}"))),
        }
        let dims_line = lines.next().ok_or_else(|| bad("missing dimension line".into()))?;
        let dims: Vec<&str> = dims_line.split_whitespace().collect();
        if dims.len() != 4 {
            return Err(bad(format!("dimension line needs `d k r alpha`, got `{dims_line}`")));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let (d, k, r) = (parse_usize(dims[0])?, parse_usize(dims[1])?, parse_usize(dims[2])?);
        let alpha: f64 = dims[3].parse().map_err(|e| bad(format!("alpha `{}`: {e}", dims[3])))?;
        let mut read_block = |tag: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{tag}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(bad(format!("expected `{tag}` line")));
            }
            let values = parts
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Matrix::new(rows, cols, values).map_err(|e| bad(format!("`{tag}` block: {e}")))
        };
        let a = read_block("a", r, k)?;
        let b = read_block("b", d, r)?;
        Self::from_parts(a, b, alpha)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Free-function form of [`LoraAdapter::init`].
pub fn init_adapter(d: usize, k: usize, rank: usize, sigma: f64, alpha: f64, rng: &mut Rng) -> Result<LoraAdapter> {
    LoraAdapter::init(d, k, rank, sigma, alpha, rng)
}

/// Free-function form of [`LoraAdapter::delta_weight`].
pub fn delta_weight(adapter: &LoraAdapter) -> Matrix {
    adapter.delta_weight()
}

/// A frozen weight `W₀` plus its trainable adapter. `W₀` has no mutable
/// accessor, so nothing outside this module can change it.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer {
    w0: Matrix,
    adapter: LoraAdapter,
}

impl FrozenLayer {
    pub fn new(w0: Matrix, adapter: LoraAdapter) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(Error::Shape {
                op: "frozen layer (W0 vs adapter)",
                left: w0.shape(),
                right: (adapter.out_dim(), adapter.in_dim()),
            });
        }
        Ok(Self { w0, adapter })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter {
        &mut self.adapter
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    /// `W₀ + ΔW`.
    pub fn effective_weight(&self) -> Matrix {
        self.w0.add(&self.adapter.delta_weight()).expect("layer invariant")
    }

    /// `W₀x + (α/r)·B(Ax)`, computed through the rank-r bottleneck.
    pub fn adapted_forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_latent(x)?.0)
    }

    /// Like [`Self::adapted_forward`] but also returns `Ax`, which the
    /// backward pass needs.
    pub(crate) fn forward_with_latent(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut out = self.w0.matmul(x)?;
        let latent = self.adapter.a.matmul(x)?;
        let lifted = self.adapter.b.matmul(&latent)?;
        out.axpy(self.adapter.scale(), &lifted)?;
        Ok((out, latent))
    }
}

/// Free-function form of [`FrozenLayer::adapted_forward`].
pub fn adapted_forward(layer: &FrozenLayer, x: &Matrix) -> Result<Matrix> {
    layer.adapted_forward(x)
}
