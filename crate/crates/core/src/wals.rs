//! Weighted alternating least squares for implicit feedback.
//!
//! Minimizes
//!
//! ```text
//! sum_{u,i} c_ui (p_ui - x_u . y_i)^2 + lambda (sum_u |x_u|^2 + sum_i |y_i|^2)
//! ```
//!
//! over every cell of the user x item matrix, with `p_ui = 1` and
//! `c_ui = 1 + alpha` on observed pairs and `p_ui = 0`, `c_ui = 1` elsewhere.
//! Each half-sweep solves all rows of one factor exactly against the other,
//! using the shared Gram matrix so unobserved cells are never enumerated.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{TensorFile, FLAG_CF};
use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalsConfig {
    pub d_cf: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub n_sweeps: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for WalsConfig {
    fn default() -> Self {
        WalsConfig {
            d_cf: 32,
            lambda: 0.1,
            alpha: 40.0,
            n_sweeps: 15,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl WalsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_cf == 0 {
            return Err(Error::invalid("d_cf must be >= 1"));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be a positive finite number"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be a non-negative finite number"));
        }
        if self.n_sweeps == 0 {
            return Err(Error::invalid("n_sweeps must be >= 1"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::invalid("init_scale must be non-negative"));
        }
        Ok(())
    }
}

/// Binary implicit feedback: the set of observed items for each user and,
/// transposed, the set of observing users for each item. Repeats collapse.
#[derive(Debug, Clone, PartialEq)]
pub struct Interactions {
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
}

impl Interactions {
    pub fn from_user_lists(n_items: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let mut by_user = Vec::with_capacity(lists.len());
        let mut by_item = vec![Vec::new(); n_items];
        for (u, items) in lists.iter().enumerate() {
            let mut items = items.clone();
            items.sort_unstable();
            items.dedup();
            for &i in &items {
                if i >= n_items {
                    return Err(Error::OutOfRange {
                        what: "item",
                        index: i,
                        len: n_items,
                    });
                }
                by_item[i].push(u);
            }
            by_user.push(items);
        }
        Ok(Interactions { by_user, by_item })
    }

    /// Training portion of a split only; validation and test targets are
    /// never observed by the factorization.
    pub fn from_train_split(split: &DatasetSplit) -> Result<Self> {
        let lists: Vec<Vec<usize>> = split.users.iter().map(|u| u.train_items.clone()).collect();
        Self::from_user_lists(split.n_items, &lists)
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn n_observed(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }

    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    pub fn is_observed(&self, user: usize, item: usize) -> bool {
        self.by_user[user].binary_search(&item).is_ok()
    }
}

/// The collaborative-filtering lookup table: one factor row per user and
/// per item.
#[derive(Debug, Clone, PartialEq)]
pub struct CfModel {
    pub user_factors: Array2<f64>,
    pub item_factors: Array2<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

impl CfModel {
    pub fn d_cf(&self) -> usize {
        self.user_factors.ncols()
    }

    pub fn n_users(&self) -> usize {
        self.user_factors.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.item_factors.nrows()
    }

    pub fn user_embedding(&self, user: usize) -> Result<Array1<f64>> {
        self.user_view(user).map(|r| r.to_owned())
    }

    pub fn item_embedding(&self, item: usize) -> Result<Array1<f64>> {
        self.item_view(item).map(|r| r.to_owned())
    }

    pub fn user_view(&self, user: usize) -> Result<ArrayView1<'_, f64>> {
        if user >= self.n_users() {
            return Err(Error::OutOfRange {
                what: "user",
                index: user,
                len: self.n_users(),
            });
        }
        Ok(self.user_factors.row(user))
    }

    pub fn item_view(&self, item: usize) -> Result<ArrayView1<'_, f64>> {
        if item >= self.n_items() {
            return Err(Error::OutOfRange {
                what: "item",
                index: item,
                len: self.n_items(),
            });
        }
        Ok(self.item_factors.row(item))
    }

    /// `x_u . y_i`, the model's preference estimate.
    pub fn preference_score(&self, user: usize, item: usize) -> Result<f64> {
        Ok(self.user_view(user)?.dot(&self.item_view(item)?))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(FLAG_CF);
        f.set_meta("d_cf", self.d_cf());
        f.set_meta("n_users", self.n_users());
        f.set_meta("n_items", self.n_items());
        f.set_meta("lambda", self.lambda);
        f.set_meta("alpha", self.alpha);
        f.push_matrix("cf.user_factors", &self.user_factors);
        f.push_matrix("cf.item_factors", &self.item_factors);
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if !f.has(FLAG_CF) {
            return Err(Error::invalid("not a collaborative-filtering checkpoint"));
        }
        let model = CfModel {
            user_factors: f.matrix("cf.user_factors")?,
            item_factors: f.matrix("cf.item_factors")?,
            lambda: f.meta_parse("lambda")?,
            alpha: f.meta_parse("alpha")?,
        };
        let d_cf: usize = f.meta_parse("d_cf")?;
        if model.item_factors.ncols() != model.d_cf() || model.d_cf() != d_cf {
            return Err(Error::Shape {
                what: "cf checkpoint",
                expected: format!("d_cf {d_cf}"),
                got: format!(
                    "{} / {}",
                    model.user_factors.ncols(),
                    model.item_factors.ncols()
                ),
            });
        }
        Ok(model)
    }
}

/// Objective after every half-sweep, in order: user solve of sweep 1, item
/// solve of sweep 1, user solve of sweep 2, ...
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub objectives: Vec<f64>,
}

pub fn fit_wals(train: &Interactions, cfg: &WalsConfig) -> Result<CfModel> {
    fit_wals_traced(train, cfg).map(|(m, _)| m)
}

pub fn fit_wals_traced(train: &Interactions, cfg: &WalsConfig) -> Result<(CfModel, FitTrace)> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, 0xcf_0001);
    let item_factors = rng::gaussian_matrix(&mut r, train.n_items(), cfg.d_cf, cfg.init_scale);
    let mut model = CfModel {
        user_factors: Array2::zeros((train.n_users(), cfg.d_cf)),
        item_factors,
        lambda: cfg.lambda,
        alpha: cfg.alpha,
    };
    let mut trace = FitTrace::default();
    for sweep in 1..=cfg.n_sweeps {
        solve_user_rows(&mut model, train);
        check_finite(&model, sweep)?;
        trace.objectives.push(wals_objective(&model, train));
        solve_item_rows(&mut model, train);
        check_finite(&model, sweep)?;
        trace.objectives.push(wals_objective(&model, train));
        log::debug!(
            "wals sweep {sweep}: objective {:.6}",
            trace.objectives.last().unwrap()
        );
    }
    Ok((model, trace))
}

fn check_finite(model: &CfModel, sweep: usize) -> Result<()> {
    let finite = model.user_factors.iter().all(|v| v.is_finite())
        && model.item_factors.iter().all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite factor after WALS sweep {sweep}"
        )))
    }
}

/// Exact ridge solve of every user row against the current item factors.
pub fn solve_user_rows(model: &mut CfModel, train: &Interactions) {
    model.user_factors = solve_rows(
        &model.item_factors,
        &train.by_user,
        model.lambda,
        model.alpha,
    );
}

/// Exact ridge solve of every item row against the current user factors.
pub fn solve_item_rows(model: &mut CfModel, train: &Interactions) {
    model.item_factors = solve_rows(
        &model.user_factors,
        &train.by_item,
        model.lambda,
        model.alpha,
    );
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.nrows(), m.ncols(), m.iter().copied())
}

/// For each row r with observed set S_r, solves
/// `(F^T F + alpha * sum_{j in S_r} f_j f_j^T + lambda I) x = (1 + alpha) sum_{j in S_r} f_j`.
fn solve_rows(
    fixed: &Array2<f64>,
    observed: &[Vec<usize>],
    lambda: f64,
    alpha: f64,
) -> Array2<f64> {
    let d = fixed.ncols();
    let fixed_na = to_dmatrix(fixed);
    let mut base = fixed_na.transpose() * &fixed_na;
    for k in 0..d {
        base[(k, k)] += lambda;
    }
    let rows: Vec<Vec<f64>> = observed
        .par_iter()
        .map(|obs| {
            if obs.is_empty() {
                return vec![0.0; d];
            }
            let mut a = base.clone();
            let mut b = DVector::<f64>::zeros(d);
            for &j in obs {
                let f = fixed.row(j);
                for p in 0..d {
                    b[p] += (1.0 + alpha) * f[p];
                    for q in 0..d {
                        a[(p, q)] += alpha * f[p] * f[q];
                    }
                }
            }
            // Positive definite for lambda > 0.
            let chol = a.cholesky().expect("regularized normal matrix is SPD");
            chol.solve(&b).iter().copied().collect()
        })
        .collect();
    let mut out = Array2::zeros((observed.len(), d));
    for (r, row) in rows.into_iter().enumerate() {
        out.row_mut(r).assign(&Array1::from(row));
    }
    out
}

/// Exact value of the weighted objective, using
/// `sum_{u,i} (x_u . y_i)^2 = sum_u x_u^T (Y^T Y) x_u` for the unobserved bulk
/// and correcting observed cells individually.
pub fn wals_objective(model: &CfModel, train: &Interactions) -> f64 {
    let x = &model.user_factors;
    let y = &model.item_factors;
    let gram = y.t().dot(y);
    let mut total = 0.0;
    for u in 0..x.nrows() {
        let xu = x.row(u);
        total += xu.dot(&gram.dot(&xu));
        for &i in train.user_items(u) {
            let s = xu.dot(&y.row(i));
            total += (1.0 + model.alpha) * (1.0 - s).powi(2) - s * s;
        }
    }
    let reg = x.iter().map(|v| v * v).sum::<f64>() + y.iter().map(|v| v * v).sum::<f64>();
    total + model.lambda * reg
}
