//! Two-layer MLPs that map collaborative-filtering embeddings into the
//! language model's token embedding space: `gelu(x W1 + b1) W2 + b2`.
//!
//! Users and items get independent projectors; nothing is shared.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::nanolm::{gelu, gelu_grad};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `d_cf x d_hidden`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `d_hidden x d_model`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectorTrace {
    pub pre: Array1<f64>,
    pub hidden: Array1<f64>,
}

impl Projector {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn init(d_cf: usize, d_hidden: usize, d_model: usize, seed: u64, stream: u64) -> Self {
        let mut r = rng::stream(seed, stream);
        Projector {
            w1: rng::gaussian_matrix(&mut r, d_cf, d_hidden, 1.0 / (d_cf as f64).sqrt()),
            b1: Array1::zeros(d_hidden),
            w2: rng::gaussian_matrix(&mut r, d_hidden, d_model, 1.0 / (d_hidden as f64).sqrt()),
            b2: Array1::zeros(d_model),
        }
    }

    pub fn zeros(d_cf: usize, d_hidden: usize, d_model: usize) -> Self {
        Projector {
            w1: Array2::zeros((d_cf, d_hidden)),
            b1: Array1::zeros(d_hidden),
            w2: Array2::zeros((d_hidden, d_model)),
            b2: Array1::zeros(d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in(), self.d_hidden(), self.d_out())
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.ncols()
    }

    fn check_input(&self, input: ArrayView1<f64>) -> Result<()> {
        if input.len() != self.d_in() {
            return Err(Error::Shape {
                what: "projector input",
                expected: self.d_in().to_string(),
                got: input.len().to_string(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite projector input".into()));
        }
        Ok(())
    }

    pub fn forward_traced(&self, input: ArrayView1<f64>) -> Result<(Array1<f64>, ProjectorTrace)> {
        self.check_input(input)?;
        let pre = input.dot(&self.w1) + &self.b1;
        let hidden = pre.mapv(gelu);
        let out = hidden.dot(&self.w2) + &self.b2;
        Ok((out, ProjectorTrace { pre, hidden }))
    }

    pub fn project(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.forward_traced(input).map(|(out, _)| out)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        input: ArrayView1<f64>,
        trace: &ProjectorTrace,
        upstream: ArrayView1<f64>,
        grads: &mut Projector,
    ) -> Result<Array1<f64>> {
        if upstream.len() != self.d_out() || input.len() != self.d_in() {
            return Err(Error::Shape {
                what: "projector backward",
                expected: format!("input {} / upstream {}", self.d_in(), self.d_out()),
                got: format!("{} / {}", input.len(), upstream.len()),
            });
        }
        grads.b2 += &upstream;
        let col = |v: ArrayView1<f64>| v.insert_axis(Axis(1)).to_owned();
        let row = |v: ArrayView1<f64>| v.insert_axis(Axis(0)).to_owned();
        grads.w2 += &col(trace.hidden.view()).dot(&row(upstream));
        let mut d_pre = self.w2.dot(&upstream);
        d_pre.zip_mut_with(&trace.pre, |d, &p| *d *= gelu_grad(p));
        grads.b1 += &d_pre;
        grads.w1 += &col(input).dot(&row(d_pre.view()));
        Ok(self.w1.dot(&d_pre))
    }

    pub fn tensors(&self) -> [(&'static str, ArrayViewD<'_, f64>); 4] {
        [
            ("w1", self.w1.view().into_dyn()),
            ("b1", self.b1.view().into_dyn()),
            ("w2", self.w2.view().into_dyn()),
            ("b2", self.b2.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, f64>); 4] {
        [
            ("w1", self.w1.view_mut().into_dyn()),
            ("b1", self.b1.view_mut().into_dyn()),
            ("w2", self.w2.view_mut().into_dyn()),
            ("b2", self.b2.view_mut().into_dyn()),
        ]
    }
}

/// The user projector `f_u` and item projector `f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorPair {
    pub user: Projector,
    pub item: Projector,
}

impl ProjectorPair {
    pub fn init(d_cf: usize, d_hidden: usize, d_model: usize, seed: u64) -> Self {
        ProjectorPair {
            user: Projector::init(d_cf, d_hidden, d_model, seed, 0x9f_0001),
            item: Projector::init(d_cf, d_hidden, d_model, seed, 0x9f_0002),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ProjectorPair {
            user: self.user.zeros_like(),
            item: self.item.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::with_capacity(8);
        for (prefix, p) in [("proj.user", &self.user), ("proj.item", &self.item)] {
            for (name, t) in p.tensors() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::with_capacity(8);
        for (prefix, p) in [("proj.user", &mut self.user), ("proj.item", &mut self.item)] {
            for (name, t) in p.tensors_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn write_sections(&self, f: &mut TensorFile) {
        for (name, t) in self.tensors() {
            f.push(
                name,
                t.shape().to_vec(),
                t.iter().map(|&v| v as f32).collect(),
            );
        }
    }

    pub fn read_sections(f: &TensorFile) -> Result<Self> {
        let user = Projector {
            w1: f.matrix("proj.user.w1")?,
            b1: f.vector("proj.user.b1")?,
            w2: f.matrix("proj.user.w2")?,
            b2: f.vector("proj.user.b2")?,
        };
        let item = Projector {
            w1: f.matrix("proj.item.w1")?,
            b1: f.vector("proj.item.b1")?,
            w2: f.matrix("proj.item.w2")?,
            b2: f.vector("proj.item.b2")?,
        };
        Ok(ProjectorPair { user, item })
    }
}
