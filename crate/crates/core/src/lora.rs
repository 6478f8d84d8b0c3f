//! Low-rank adapted linear layers.
//!
//! A layer holds a frozen base weight `W0` (`n1 x n2`) and a trainable pair
//! `B` (`n1 x r`), `A` (`r x n2`); its effective weight is `W0 + B A`.
//! Dropout removes whole columns of `A` (input side) and whole rows of `B`
//! (output side): `Â = A diag(m_a)`, `B̂ = diag(m_b) B`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::rng::Rng;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Frozen base weight plus trainable low-rank pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    base: Matrix,
    b: Matrix,
    a: Matrix,
}

/// Gradient of a scalar loss with respect to an adapter's `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskMode {
    /// Entries are 0/1, kept with probability `1 - rate`.
    Bernoulli,
    /// Entries are drawn from `N(1, sigma^2)`; nothing is removed.
    Gaussian { sigma: f64 },
}

impl MaskMode {
    /// Gaussian mode with `sigma^2 = rate / (1 - rate)`, the variance of an
    /// inverted Bernoulli mask with the same rate.
    pub fn variance_matched(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(MaskMode::Gaussian {
            sigma: num_traits::Float::sqrt(rate / (1.0 - rate)),
        })
    }
}

/// Per-layer dropout mask: `mask_a` multiplies the columns of `A` (length
/// `n2`), `mask_b` the rows of `B` (length `n1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub mask_a: Vector,
    pub mask_b: Vector,
    pub rate: f64,
    pub mode: MaskMode,
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(domain_err!("dropout rate {rate} outside [0, 1)"));
    }
    Ok(())
}

impl DropoutMask {
    /// All-ones mask (no dropout).
    pub fn identity(n1: usize, n2: usize) -> Self {
        DropoutMask {
            mask_a: Vector::from_element(n2, 1.0),
            mask_b: Vector::from_element(n1, 1.0),
            rate: 0.0,
            mode: MaskMode::Bernoulli,
        }
    }

    pub fn n1(&self) -> usize {
        self.mask_b.len()
    }

    pub fn n2(&self) -> usize {
        self.mask_a.len()
    }

    pub fn kept_a(&self) -> usize {
        self.mask_a.iter().filter(|&&m| m != 0.0).count()
    }

    pub fn kept_b(&self) -> usize {
        self.mask_b.iter().filter(|&&m| m != 0.0).count()
    }

    fn check_dims(&self, adapter: &LoraAdapter) -> Result<()> {
        if self.n1() != adapter.n1() || self.n2() != adapter.n2() {
            return Err(shape_err!(
                "mask is {}x{}, adapter is {}x{}",
                self.n1(),
                self.n2(),
                adapter.n1(),
                adapter.n2()
            ));
        }
        Ok(())
    }
}

/// Draws a mask. Deterministic in `(rate, dims, mode, seed)`.
pub fn sample_mask(rate: f64, dims: (usize, usize), mode: MaskMode, seed: u64) -> Result<DropoutMask> {
    let mut rng = crate::rng::rng_from(&[crate::rng::tag::MASK, seed]);
    sample_mask_with(rate, dims, mode, &mut rng)
}

pub fn sample_mask_with(rate: f64, (n1, n2): (usize, usize), mode: MaskMode, rng: &mut Rng) -> Result<DropoutMask> {
    check_rate(rate)?;
    let (mask_a, mask_b) = match mode {
        MaskMode::Bernoulli => {
            if rate == 0.0 {
                (Vector::from_element(n2, 1.0), Vector::from_element(n1, 1.0))
            } else {
                let keep = 1.0 - rate;
                let mut draw =
                    |n: usize| Vector::from_iterator(n, (0..n).map(|_| if rng.random_bool(keep) { 1.0 } else { 0.0 }));
                let a = draw(n2);
                let b = draw(n1);
                (a, b)
            }
        }
        MaskMode::Gaussian { sigma } => {
            let normal = Normal::new(1.0, sigma).map_err(|_| domain_err!("invalid gaussian mask sigma {sigma}"))?;
            let a = Vector::from_iterator(n2, (0..n2).map(|_| normal.sample(rng)));
            let b = Vector::from_iterator(n1, (0..n1).map(|_| normal.sample(rng)));
            (a, b)
        }
    };
    Ok(DropoutMask {
        mask_a,
        mask_b,
        rate,
        mode,
    })
}

/// Number of parameters in the sub-adapter selected by a Bernoulli mask:
/// `r * (kept columns of A + kept rows of B)`.
pub fn sub_adapter_size(mask: &DropoutMask, rank: usize) -> Result<usize> {
    match mask.mode {
        MaskMode::Bernoulli => Ok(rank * (mask.kept_a() + mask.kept_b())),
        MaskMode::Gaussian { .. } => Err(Error::Unsupported("gaussian masks do not sparsify the adapter".into())),
    }
}

impl LoraAdapter {
    pub fn new(base: Matrix, b: Matrix, a: Matrix) -> Result<Self> {
        let (n1, n2) = base.shape();
        let r = b.ncols();
        if b.nrows() != n1 || a.nrows() != r || a.ncols() != n2 {
            return Err(shape_err!(
                "base {}x{}, B {}x{}, A {}x{}",
                n1,
                n2,
                b.nrows(),
                b.ncols(),
                a.nrows(),
                a.ncols()
            ));
        }
        if r == 0 || r > n1.min(n2) {
            return Err(domain_err!("rank {r} must be in 1..=min({n1}, {n2})"));
        }
        Ok(LoraAdapter { base, b, a })
    }

    /// Standard initialization: `B = 0`, `A ~ U(-scale, scale)`.
    pub fn init(base: Matrix, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let (n1, n2) = base.shape();
        let a = Matrix::from_fn(rank, n2, |_, _| rng.random_range(-scale..=scale));
        LoraAdapter::new(base, Matrix::zeros(n1, rank), a)
    }

    pub fn n1(&self) -> usize {
        self.base.nrows()
    }

    pub fn n2(&self) -> usize {
        self.base.ncols()
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    /// Full trainable payload `(n1 + n2) r`.
    pub fn full_size(&self) -> usize {
        (self.n1() + self.n2()) * self.rank()
    }

    pub fn delta(&self) -> Matrix {
        &self.b * &self.a
    }

    pub fn effective_weight(&self) -> Matrix {
        &self.base + self.delta()
    }

    /// The sub-adapter `(B̂, Â)` a device receives. The base weight is shared.
    pub fn masked(&self, mask: &DropoutMask) -> Result<LoraAdapter> {
        mask.check_dims(self)?;
        let mut a = self.a.clone();
        for (j, mut col) in a.column_iter_mut().enumerate() {
            col *= mask.mask_a[j];
        }
        let mut b = self.b.clone();
        for (i, mut row) in b.row_iter_mut().enumerate() {
            row *= mask.mask_b[i];
        }
        Ok(LoraAdapter {
            base: self.base.clone(),
            b,
            a,
        })
    }

    pub fn masked_weight(&self, mask: &DropoutMask) -> Result<Matrix> {
        Ok(self.masked(mask)?.effective_weight())
    }

    fn check_input(&self, input: &Vector) -> Result<()> {
        if input.len() != self.n2() {
            return Err(shape_err!("input length {} != n2 = {}", input.len(), self.n2()));
        }
        Ok(())
    }

    /// `(W0 + B A) f`.
    pub fn forward(&self, input: &Vector) -> Result<Vector> {
        self.check_input(input)?;
        Ok(&self.base * input + &self.b * (&self.a * input))
    }

    /// `(W0 + B̂ Â) f`.
    pub fn masked_forward(&self, mask: &DropoutMask, input: &Vector) -> Result<Vector> {
        mask.check_dims(self)?;
        self.check_input(input)?;
        let low = &self.a * input.component_mul(&mask.mask_a);
        let up = (&self.b * low).component_mul(&mask.mask_b);
        Ok(&self.base * input + up)
    }

    /// Gradients of the loss w.r.t. `B` and `A` given `∂ℓ/∂h`:
    /// `∂B = g (A f)^T`, `∂A = B^T g f^T`.
    pub fn backward(&self, input: &Vector, upstream: &Vector) -> Result<AdapterGradient> {
        Ok(self.backward_full(None, input, upstream)?.0)
    }

    /// Gradients through the masked forward pass. Rows of `∂B` and columns of
    /// `∂A` at dropped positions come out exactly zero.
    pub fn masked_backward(&self, mask: &DropoutMask, input: &Vector, upstream: &Vector) -> Result<AdapterGradient> {
        Ok(self.backward_full(Some(mask), input, upstream)?.0)
    }

    /// Adapter gradient plus `∂ℓ/∂f` for backpropagating into the previous layer.
    pub(crate) fn backward_full(
        &self,
        mask: Option<&DropoutMask>,
        input: &Vector,
        upstream: &Vector,
    ) -> Result<(AdapterGradient, Vector)> {
        self.check_input(input)?;
        if upstream.len() != self.n1() {
            return Err(shape_err!("upstream length {} != n1 = {}", upstream.len(), self.n1()));
        }
        let (x, g) = match mask {
            Some(m) => {
                m.check_dims(self)?;
                (input.component_mul(&m.mask_a), upstream.component_mul(&m.mask_b))
            }
            None => (input.clone(), upstream.clone()),
        };
        let low = &self.a * &x;
        let bt_g = self.b.transpose() * &g;
        let grad_b = &g * low.transpose();
        let grad_a = &bt_g * x.transpose();
        let mut back = self.a.transpose() * &bt_g;
        if let Some(m) = mask {
            back.component_mul_assign(&m.mask_a);
        }
        back += self.base.transpose() * upstream;
        Ok((AdapterGradient { grad_a, grad_b }, back))
    }

    /// `B - lr ∂B`, `A - lr ∂A`. The base weight is untouched.
    pub fn sgd_update(&self, grad: &AdapterGradient, lr: f64) -> Result<LoraAdapter> {
        let mut next = self.clone();
        next.apply_sgd(grad, lr)?;
        Ok(next)
    }

    pub fn apply_sgd(&mut self, grad: &AdapterGradient, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(domain_err!("learning rate must be positive, got {lr}"));
        }
        grad.check_shapes(self)?;
        self.b -= &grad.grad_b * lr;
        self.a -= &grad.grad_a * lr;
        Ok(())
    }

    pub fn set_trainable(&mut self, b: Matrix, a: Matrix) -> Result<()> {
        if b.shape() != self.b.shape() || a.shape() != self.a.shape() {
            return Err(shape_err!("replacement trainable matrices have wrong shape"));
        }
        self.b = b;
        self.a = a;
        Ok(())
    }
}

/// `(W0 + B A) f` as a free function.
pub fn lora_forward(adapter: &LoraAdapter, input: &Vector) -> Result<Vector> {
    adapter.forward(input)
}

pub fn masked_forward(adapter: &LoraAdapter, mask: &DropoutMask, input: &Vector) -> Result<Vector> {
    adapter.masked_forward(mask, input)
}

pub fn lora_backward(adapter: &LoraAdapter, input: &Vector, upstream: &Vector) -> Result<AdapterGradient> {
    adapter.backward(input, upstream)
}

pub fn sgd_update(adapter: &LoraAdapter, grad: &AdapterGradient, lr: f64) -> Result<LoraAdapter> {
    adapter.sgd_update(grad, lr)
}

impl AdapterGradient {
    pub fn zeros(n1: usize, n2: usize, rank: usize) -> Self {
        AdapterGradient {
            grad_a: Matrix::zeros(rank, n2),
            grad_b: Matrix::zeros(n1, rank),
        }
    }

    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self::zeros(adapter.n1(), adapter.n2(), adapter.rank())
    }

    pub fn check_shapes(&self, adapter: &LoraAdapter) -> Result<()> {
        if self.grad_a.shape() != adapter.a.shape() || self.grad_b.shape() != adapter.b.shape() {
            return Err(shape_err!("gradient shape does not match adapter"));
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &AdapterGradient, scale: f64) {
        self.grad_a += &other.grad_a * scale;
        self.grad_b += &other.grad_b * scale;
    }

    pub fn scale(&mut self, s: f64) {
        self.grad_a *= s;
        self.grad_b *= s;
    }

    pub fn norm_squared(&self) -> f64 {
        self.grad_a.norm_squared() + self.grad_b.norm_squared()
    }

    pub fn is_zero(&self) -> bool {
        self.grad_a.iter().chain(self.grad_b.iter()).all(|&v| v == 0.0)
    }
}

/// Compact upload: only the kept rows of `∂B` and kept columns of `∂A`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedGradient {
    pub rows_b: Vec<usize>,
    pub cols_a: Vec<usize>,
    pub values_b: Matrix,
    pub values_a: Matrix,
}

impl PackedGradient {
    pub fn pack(grad: &AdapterGradient, mask: &DropoutMask) -> Result<Self> {
        if grad.grad_b.nrows() != mask.n1() || grad.grad_a.ncols() != mask.n2() {
            return Err(shape_err!("gradient and mask dimensions differ"));
        }
        let rows_b: Vec<usize> = (0..mask.n1()).filter(|&i| mask.mask_b[i] != 0.0).collect();
        let cols_a: Vec<usize> = (0..mask.n2()).filter(|&j| mask.mask_a[j] != 0.0).collect();
        let values_b = grad.grad_b.select_rows(rows_b.iter());
        let values_a = grad.grad_a.select_columns(cols_a.iter());
        Ok(PackedGradient {
            rows_b,
            cols_a,
            values_b,
            values_a,
        })
    }

    /// Parameters on the wire.
    pub fn len(&self) -> usize {
        self.values_a.len() + self.values_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Server-side reconstruction: scatter the kept entries into a full-size
    /// gradient, zeros everywhere else.
    pub fn zero_pad(&self, n1: usize, n2: usize, rank: usize) -> Result<AdapterGradient> {
        if self.values_b.ncols() != rank && !self.rows_b.is_empty()
            || self.values_a.nrows() != rank && !self.cols_a.is_empty()
        {
            return Err(shape_err!("packed gradient rank mismatch"));
        }
        let mut out = AdapterGradient::zeros(n1, n2, rank);
        for (k, &i) in self.rows_b.iter().enumerate() {
            if i >= n1 {
                return Err(shape_err!("row index {i} out of range"));
            }
            out.grad_b.set_row(i, &self.values_b.row(k));
        }
        for (k, &j) in self.cols_a.iter().enumerate() {
            if j >= n2 {
                return Err(shape_err!("column index {j} out of range"));
            }
            out.grad_a.set_column(j, &self.values_a.column(k));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: usize, c: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0))
    }

    fn random_adapter(n1: usize, n2: usize, r: usize, rng: &mut Rng) -> LoraAdapter {
        LoraAdapter::new(
            random_matrix(n1, n2, rng),
            random_matrix(n1, r, rng),
            random_matrix(r, n2, rng),
        )
        .unwrap()
    }

    #[test]
    fn forward_with_zero_b_is_base() {
        let mut g = rng(1);
        let base = random_matrix(3, 4, &mut g);
        let ad = LoraAdapter::new(base.clone(), Matrix::zeros(3, 2), random_matrix(2, 4, &mut g)).unwrap();
        let f = Vector::from_vec(alloc::vec![0.5, -1.0, 2.0, 0.25]);
        assert_eq!(ad.forward(&f).unwrap(), &base * &f);
        assert_eq!(ad.forward(&Vector::zeros(4)).unwrap(), Vector::zeros(3));
    }

    #[test]
    fn forward_small_example() {
        let ad = LoraAdapter::new(
            Matrix::identity(2, 2),
            Matrix::from_row_slice(2, 1, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )
        .unwrap();
        let out = ad.forward(&Vector::from_vec(alloc::vec![2.0, 3.0])).unwrap();
        // dense oracle: W = [[1,1],[0,1]]
        let w = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(out, &w * Vector::from_vec(alloc::vec![2.0, 3.0]));
        assert_eq!(out.as_slice(), &[5.0, 3.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = rng(2);
        let ad = random_adapter(3, 4, 2, &mut g);
        assert!(matches!(ad.forward(&Vector::zeros(3)), Err(Error::Shape(_))));
        assert!(matches!(
            ad.backward(&Vector::zeros(4), &Vector::zeros(4)),
            Err(Error::Shape(_))
        ));
        let bad_mask = DropoutMask::identity(4, 4);
        assert!(ad.masked_forward(&bad_mask, &Vector::zeros(4)).is_err());
        assert!(LoraAdapter::new(Matrix::zeros(2, 2), Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn masked_forward_matches_dense_diag_products() {
        let mut g = rng(3);
        let ad = random_adapter(4, 4, 2, &mut g);
        let mask = sample_mask(0.5, (4, 4), MaskMode::Bernoulli, 11).unwrap();
        let f = random_matrix(4, 1, &mut g).column(0).into_owned();
        let a_hat = ad.a() * Matrix::from_diagonal(&mask.mask_a);
        let b_hat = (ad.b().transpose() * Matrix::from_diagonal(&mask.mask_b)).transpose();
        let oracle = (ad.base() + b_hat * a_hat) * &f;
        assert_relative_eq!(ad.masked_forward(&mask, &f).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn masked_forward_degenerate_masks() {
        let mut g = rng(4);
        let ad = random_adapter(5, 3, 2, &mut g);
        let f = Vector::from_vec(alloc::vec![1.0, -2.0, 0.5]);
        let id = sample_mask(0.0, (5, 3), MaskMode::Bernoulli, 1).unwrap();
        assert_eq!(id, DropoutMask::identity(5, 3));
        assert_relative_eq!(
            ad.masked_forward(&id, &f).unwrap(),
            ad.forward(&f).unwrap(),
            epsilon = 1e-14
        );
        let mut off = DropoutMask::identity(5, 3);
        off.mask_b.fill(0.0);
        assert_eq!(ad.masked_forward(&off, &f).unwrap(), ad.base() * &f);
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = rng(5);
        let ad = random_adapter(3, 4, 2, &mut g);
        let f = Vector::from_vec(alloc::vec![1.0, 2.0, 3.0, 4.0]);
        assert!(ad.backward(&f, &Vector::zeros(3)).unwrap().is_zero());

        let zb = LoraAdapter::new(ad.base().clone(), Matrix::zeros(3, 2), ad.a().clone()).unwrap();
        let up = Vector::from_vec(alloc::vec![1.0, -1.0, 0.5]);
        let grad = zb.backward(&f, &up).unwrap();
        assert!(grad.grad_a.iter().all(|&v| v == 0.0));
        assert_eq!(grad.grad_b, &up * (ad.a() * &f).transpose());
    }

    /// Central differences of `ℓ = c · h(f)` w.r.t. every entry of A and B.
    fn fd_gradient(ad: &LoraAdapter, mask: Option<&DropoutMask>, f: &Vector, c: &Vector) -> AdapterGradient {
        let loss = |ad: &LoraAdapter| -> f64 {
            let h = match mask {
                Some(m) => ad.masked_forward(m, f).unwrap(),
                None => ad.forward(f).unwrap(),
            };
            c.dot(&h)
        };
        let eps = 1e-6;
        let mut out = AdapterGradient::zeros_like(ad);
        for i in 0..ad.a().nrows() {
            for j in 0..ad.a().ncols() {
                let mut p = ad.clone();
                p.a[(i, j)] += eps;
                let mut m = ad.clone();
                m.a[(i, j)] -= eps;
                out.grad_a[(i, j)] = (loss(&p) - loss(&m)) / (2.0 * eps);
            }
        }
        for i in 0..ad.b().nrows() {
            for j in 0..ad.b().ncols() {
                let mut p = ad.clone();
                p.b[(i, j)] += eps;
                let mut m = ad.clone();
                m.b[(i, j)] -= eps;
                out.grad_b[(i, j)] = (loss(&p) - loss(&m)) / (2.0 * eps);
            }
        }
        out
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = rng(6);
        for _ in 0..10 {
            let n1 = g.random_range(2..=6);
            let n2 = g.random_range(2..=6);
            let r = g.random_range(1..=n1.min(n2));
            let ad = random_adapter(n1, n2, r, &mut g);
            let f = random_matrix(n2, 1, &mut g).column(0).into_owned();
            let c = random_matrix(n1, 1, &mut g).column(0).into_owned();
            let an = ad.backward(&f, &c).unwrap();
            let fd = fd_gradient(&ad, None, &f, &c);
            assert_relative_eq!(an.grad_a, fd.grad_a, epsilon = 1e-7, max_relative = 1e-5);
            assert_relative_eq!(an.grad_b, fd.grad_b, epsilon = 1e-7, max_relative = 1e-5);

            let mask = sample_mask(0.4, (n1, n2), MaskMode::Bernoulli, g.random()).unwrap();
            let an = ad.masked_backward(&mask, &f, &c).unwrap();
            let fd = fd_gradient(&ad, Some(&mask), &f, &c);
            assert_relative_eq!(an.grad_a, fd.grad_a, epsilon = 1e-7, max_relative = 1e-5);
            assert_relative_eq!(an.grad_b, fd.grad_b, epsilon = 1e-7, max_relative = 1e-5);
        }
    }

    #[test]
    fn masked_gradient_is_sparse() {
        let mut g = rng(7);
        let ad = random_adapter(6, 5, 3, &mut g);
        let mask = sample_mask(0.5, (6, 5), MaskMode::Bernoulli, 99).unwrap();
        let f = random_matrix(5, 1, &mut g).column(0).into_owned();
        let up = random_matrix(6, 1, &mut g).column(0).into_owned();
        let grad = ad.masked_backward(&mask, &f, &up).unwrap();
        for j in 0..5 {
            if mask.mask_a[j] == 0.0 {
                assert!(grad.grad_a.column(j).iter().all(|&v| v == 0.0));
            }
        }
        for i in 0..6 {
            if mask.mask_b[i] == 0.0 {
                assert!(grad.grad_b.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sgd_update_rules() {
        let ad = LoraAdapter::new(
            Matrix::from_element(1, 1, 3.0),
            Matrix::from_element(1, 1, 2.0),
            Matrix::from_element(1, 1, 5.0),
        )
        .unwrap();
        let grad = AdapterGradient {
            grad_a: Matrix::zeros(1, 1),
            grad_b: Matrix::from_element(1, 1, 1.0),
        };
        let next = ad.sgd_update(&grad, 1.0).unwrap();
        assert_eq!(next.b()[(0, 0)], 1.0);
        assert_eq!(next.a()[(0, 0)], 5.0);
        assert_eq!(next.base(), ad.base());
        assert_eq!(ad.sgd_update(&AdapterGradient::zeros_like(&ad), 0.3).unwrap(), ad);
        assert!(matches!(ad.sgd_update(&grad, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn two_half_steps_equal_one_full_step() {
        let mut g = rng(8);
        let ad = random_adapter(4, 3, 2, &mut g);
        let grad = AdapterGradient {
            grad_a: random_matrix(2, 3, &mut g),
            grad_b: random_matrix(4, 2, &mut g),
        };
        let two = ad.sgd_update(&grad, 0.05).unwrap().sgd_update(&grad, 0.05).unwrap();
        let one = ad.sgd_update(&grad, 0.1).unwrap();
        assert_relative_eq!(two.a(), one.a(), epsilon = 1e-14);
        assert_relative_eq!(two.b(), one.b(), epsilon = 1e-14);
    }

    #[test]
    fn sample_mask_domain_and_determinism() {
        assert!(matches!(
            sample_mask(1.0, (2, 2), MaskMode::Bernoulli, 0),
            Err(Error::Domain(_))
        ));
        assert!(sample_mask(-0.1, (2, 2), MaskMode::Bernoulli, 0).is_err());
        let a = sample_mask(0.3, (20, 30), MaskMode::Bernoulli, 5).unwrap();
        let b = sample_mask(0.3, (20, 30), MaskMode::Bernoulli, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.mask_a.iter().chain(a.mask_b.iter()).all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn keep_fraction_concentrates() {
        let n = 10_000;
        let m = sample_mask(0.5, (n, n), MaskMode::Bernoulli, 42).unwrap();
        let fa = m.kept_a() as f64 / n as f64;
        let fb = m.kept_b() as f64 / n as f64;
        assert!((fa - 0.5).abs() < 0.02, "{fa}");
        assert!((fb - 0.5).abs() < 0.02, "{fb}");
    }

    #[test]
    fn gaussian_mask_statistics() {
        let mode = MaskMode::variance_matched(0.2).unwrap();
        let MaskMode::Gaussian { sigma } = mode else {
            unreachable!()
        };
        assert_relative_eq!(sigma * sigma, 0.25, epsilon = 1e-15);
        let m = sample_mask(0.2, (20_000, 1), mode, 3).unwrap();
        let mean = m.mask_b.mean();
        let var = m.mask_b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20_000.0;
        assert!((mean - 1.0).abs() < 0.02);
        assert!((var - 0.25).abs() < 0.02);
        assert!(matches!(sub_adapter_size(&m, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sub_adapter_size_counts() {
        let full = sample_mask(0.0, (10, 10), MaskMode::Bernoulli, 0).unwrap();
        assert_eq!(sub_adapter_size(&full, 2).unwrap(), 40);
        let mut m = DropoutMask::identity(6, 7);
        m.mask_a = Vector::from_vec(alloc::vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        m.mask_b = Vector::from_vec(alloc::vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(sub_adapter_size(&m, 4).unwrap(), 32);
    }

    #[test]
    fn expected_payload_at_half_rate() {
        let draws = 20_000;
        let total: usize = (0..draws)
            .map(|s| sub_adapter_size(&sample_mask(0.5, (10, 10), MaskMode::Bernoulli, s).unwrap(), 2).unwrap())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 20.0).abs() < 0.02 * 20.0, "{mean}");
    }

    #[test]
    fn pack_and_zero_pad_roundtrip() {
        let mut g = rng(9);
        let ad = random_adapter(6, 5, 2, &mut g);
        let mask = sample_mask(0.5, (6, 5), MaskMode::Bernoulli, 17).unwrap();
        let f = random_matrix(5, 1, &mut g).column(0).into_owned();
        let up = random_matrix(6, 1, &mut g).column(0).into_owned();
        let grad = ad.masked_backward(&mask, &f, &up).unwrap();
        let packed = PackedGradient::pack(&grad, &mask).unwrap();
        assert_eq!(packed.len(), sub_adapter_size(&mask, 2).unwrap());
        assert_eq!(packed.zero_pad(6, 5, 2).unwrap(), grad);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn masking_is_idempotent(seed in any::<u64>(), rate in 0.0f64..0.95, n1 in 1usize..7, n2 in 1usize..7) {
                let mut g = rng(seed);
                let r = 1 + (seed as usize) % n1.min(n2);
                let ad = random_adapter(n1, n2, r, &mut g);
                let mask = sample_mask(rate, (n1, n2), MaskMode::Bernoulli, seed).unwrap();
                let once = ad.masked(&mask).unwrap();
                let twice = once.masked(&mask).unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn masked_forward_equals_forward_of_masked_adapter(seed in any::<u64>(), rate in 0.0f64..0.9) {
                let mut g = rng(seed);
                let ad = random_adapter(5, 4, 2, &mut g);
                let mask = sample_mask(rate, (5, 4), MaskMode::Bernoulli, seed ^ 1).unwrap();
                let f = random_matrix(4, 1, &mut g).column(0).into_owned();
                let lhs = ad.masked_forward(&mask, &f).unwrap();
                let rhs = ad.masked(&mask).unwrap().forward(&f).unwrap();
                prop_assert!((lhs - rhs).amax() < 1e-12);
            }
        }
    }
}
