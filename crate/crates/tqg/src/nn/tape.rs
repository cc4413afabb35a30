use super::tensor::Tensor2;
use super::GRAPHNORM_EPS;
use crate::{Error, Result};

/// Guard added under the square root when normalizing embedding rows, so
/// all-zero rows stay differentiable. Floors the row norm at 1e-6, keeping
/// gradients bounded near collapsed embeddings.
const L2_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// matrix plus a 1×C row vector, broadcast over rows
    AddBias(Var, Var),
    Mul(Var, Var),
    /// `mul * a + constant`, elementwise; only the factor matters going backward
    AffineScalar(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    GraphNorm {
        h: Var,
        alpha: Var,
        gamma: Var,
        beta: Var,
    },
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    PickRow(Var, usize),
    RowSoftmax(Var),
    /// scalar NT-Xent from a 2B×2B similarity-logit matrix; positives are
    /// rows (i, (i+B) mod 2B), the diagonal is excluded
    NtxentFromSim(Var),
    /// mean absolute error of `pred` against a constant target over the
    /// cells where `mask` is true
    MaskedMae {
        pred: Var,
        target: Tensor2,
        mask: Vec<bool>,
    },
}

struct Node {
    op: Op,
    value: Tensor2,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Grads {
    grads: Vec<Option<Tensor2>>,
}

impl Grads {
    /// Gradient w.r.t. `v`; zero tensor if the node does not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Tensor2::zeros(r, c)
            }
        }
    }
}

/// Eagerly-evaluated computation record with reverse-mode backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Register an input (leaf) tensor. Non-finite entries are rejected here,
    /// the boundary of every layer computation.
    pub fn input(&mut self, t: Tensor2) -> Var {
        assert!(t.is_finite(), "non-finite input tensor");
        self.push(Op::Input, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (bn, bc) = self.value(bias).shape();
        let (_, c) = self.value(a).shape();
        assert!(bn == 1 && bc == c, "bias must be 1x{c}");
        let b = self.value(bias).clone();
        let v = {
            let at = self.value(a);
            let mut out = at.clone();
            for i in 0..at.rows() {
                for j in 0..c {
                    out[(i, j)] += b[(0, j)];
                }
            }
            out
        };
        self.push(Op::AddBias(a, bias), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn affine_scalar(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let v = self.value(a).map(|x| mul * x + add);
        self.push(Op::AffineScalar(a, mul), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    /// GraphNorm: per column j, `γ_j (h_ij − α_j μ_j) / σ_j + β_j` where
    /// `μ_j` is the column mean and `σ_j² = mean_i (h_ij − α_j μ_j)² + eps`.
    pub fn graphnorm(&mut self, h: Var, alpha: Var, gamma: Var, beta: Var) -> Var {
        let (n, f) = self.value(h).shape();
        assert!(n >= 1);
        for p in [alpha, gamma, beta] {
            assert_eq!(self.value(p).shape(), (1, f), "graphnorm params must be 1x{f}");
        }
        let (mu, sigma) = self.graphnorm_stats(h, alpha);
        let ht = self.value(h);
        let al = self.value(alpha);
        let ga = self.value(gamma);
        let be = self.value(beta);
        let mut out = Tensor2::zeros(n, f);
        for i in 0..n {
            for j in 0..f {
                let c = ht[(i, j)] - al[(0, j)] * mu[j];
                out[(i, j)] = ga[(0, j)] * c / sigma[j] + be[(0, j)];
            }
        }
        self.push(Op::GraphNorm { h, alpha, gamma, beta }, out)
    }

    fn graphnorm_stats(&self, h: Var, alpha: Var) -> (Vec<f64>, Vec<f64>) {
        let ht = self.value(h);
        let al = self.value(alpha);
        let (n, f) = ht.shape();
        let mut mu = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                mu[j] += ht[(i, j)];
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        let mut sigma = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                let c = ht[(i, j)] - al[(0, j)] * mu[j];
                sigma[j] += c * c;
            }
        }
        for s in sigma.iter_mut() {
            *s = (*s / n as f64 + GRAPHNORM_EPS).sqrt();
        }
        (mu, sigma)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let (n, c) = at.shape();
        let mut out = Tensor2::zeros(n, c);
        for i in 0..n {
            let nu = row_norm(at.row(i));
            for j in 0..c {
                out[(i, j)] = at[(i, j)] / nu;
            }
        }
        self.push(Op::L2NormalizeRows(a), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor2::from_vec(total, c, data))
    }

    pub fn pick_row(&mut self, a: Var, row: usize) -> Var {
        let at = self.value(a);
        assert!(row < at.rows());
        let v = Tensor2::from_vec(1, at.cols(), at.row(row).to_vec());
        self.push(Op::PickRow(a, row), v)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let (n, c) = at.shape();
        let mut out = Tensor2::zeros(n, c);
        for i in 0..n {
            let row = at.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row {
                denom += (x - m).exp();
            }
            for j in 0..c {
                out[(i, j)] = (row[j] - m).exp() / denom;
            }
        }
        self.push(Op::RowSoftmax(a), out)
    }

    pub fn ntxent_from_sim(&mut self, sim: Var) -> Var {
        let s = self.value(sim);
        let (n, n2) = s.shape();
        assert!(n == n2 && n >= 4 && n % 2 == 0, "similarity matrix must be 2Bx2B, B >= 2");
        let b = n / 2;
        let mut loss = 0.0;
        for i in 0..n {
            let pos = (i + b) % n;
            let row = s.row(i);
            let mut m = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if j != i {
                    m = m.max(x);
                }
            }
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if j != i {
                    denom += (x - m).exp();
                }
            }
            loss += -row[pos] + m + denom.ln();
        }
        loss /= n as f64;
        self.push(Op::NtxentFromSim(sim), Tensor2::scalar(loss))
    }

    /// Mean |pred − target| over cells where `mask` is true (row-major).
    pub fn masked_mae(&mut self, pred: Var, target: Tensor2, mask: Vec<bool>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != target.data().len() {
            return Err(Error::ShapeMismatch(format!(
                "masked_mae: pred {:?}, target {:?}, mask {}",
                p.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut acc = 0.0;
        for (k, (&pv, &tv)) in p.data().iter().zip(target.data()).enumerate() {
            if mask[k] {
                acc += (pv - tv).abs();
            }
        }
        let value = Tensor2::scalar(acc / count as f64);
        Ok(self.push(Op::MaskedMae { pred, target, mask }, value))
    }

    /// Reverse-mode sweep from the scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let accumulate = |grads: &mut [Option<Tensor2>], v: Var, delta: Tensor2| {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_tn(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddBias(a, bias) => {
                accumulate(grads, *a, g.clone());
                let (n, c) = g.shape();
                let mut db = Tensor2::zeros(1, c);
                for i in 0..n {
                    for j in 0..c {
                        db[(0, j)] += g[(i, j)];
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y);
                let db = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AffineScalar(a, mul) => {
                accumulate(grads, *a, g.map(|x| mul * x));
            }
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = g.zip_map(out, |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *a, da);
            }
            Op::GraphNorm { h, alpha, gamma, beta } => {
                self.graphnorm_backward(g, *h, *alpha, *gamma, *beta, grads, &accumulate);
            }
            Op::L2NormalizeRows(a) => {
                let at = self.value(*a);
                let (n, c) = at.shape();
                let mut da = Tensor2::zeros(n, c);
                for i in 0..n {
                    let x = at.row(i);
                    let nu = row_norm(x);
                    let dot: f64 = (0..c).map(|j| g[(i, j)] * x[j]).sum();
                    for j in 0..c {
                        da[(i, j)] = g[(i, j)] / nu - x[j] * dot / (nu * nu * nu);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    let mut dp = Tensor2::zeros(pr, pc);
                    for i in 0..pr {
                        for j in 0..pc {
                            dp[(i, j)] = g[(offset + i, j)];
                        }
                    }
                    accumulate(grads, p, dp);
                    offset += pr;
                }
            }
            Op::PickRow(a, row) => {
                let (n, c) = self.value(*a).shape();
                let mut da = Tensor2::zeros(n, c);
                for j in 0..c {
                    da[(*row, j)] = g[(0, j)];
                }
                accumulate(grads, *a, da);
            }
            Op::RowSoftmax(a) => {
                let (n, c) = out.shape();
                let mut da = Tensor2::zeros(n, c);
                for i in 0..n {
                    let dot: f64 = (0..c).map(|j| g[(i, j)] * out[(i, j)]).sum();
                    for j in 0..c {
                        da[(i, j)] = out[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::NtxentFromSim(sim) => {
                let s = self.value(*sim);
                let n = s.rows();
                let b = n / 2;
                let scale = g.item() / n as f64;
                let mut ds = Tensor2::zeros(n, n);
                for i in 0..n {
                    let pos = (i + b) % n;
                    let row = s.row(i);
                    let mut m = f64::NEG_INFINITY;
                    for (j, &x) in row.iter().enumerate() {
                        if j != i {
                            m = m.max(x);
                        }
                    }
                    let mut denom = 0.0;
                    for (j, &x) in row.iter().enumerate() {
                        if j != i {
                            denom += (x - m).exp();
                        }
                    }
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let p = (row[j] - m).exp() / denom;
                        let indicator = if j == pos { 1.0 } else { 0.0 };
                        ds[(i, j)] = scale * (p - indicator);
                    }
                }
                accumulate(grads, *sim, ds);
            }
            Op::MaskedMae { pred, target, mask } => {
                let p = self.value(*pred);
                let (n, c) = p.shape();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item() / count;
                let mut dp = Tensor2::zeros(n, c);
                for (k, slot) in dp.data_mut().iter_mut().enumerate() {
                    if mask[k] {
                        let d = p.data()[k] - target.data()[k];
                        // subgradient 0 at exact ties
                        *slot = scale * d.signum() * if d == 0.0 { 0.0 } else { 1.0 };
                    }
                }
                accumulate(grads, *pred, dp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn graphnorm_backward(
        &self,
        g: &Tensor2,
        h: Var,
        alpha: Var,
        gamma: Var,
        beta: Var,
        grads: &mut [Option<Tensor2>],
        accumulate: &impl Fn(&mut [Option<Tensor2>], Var, Tensor2),
    ) {
        let ht = self.value(h);
        let al = self.value(alpha);
        let ga = self.value(gamma);
        let (n, f) = ht.shape();
        let (mu, sigma) = self.graphnorm_stats(h, alpha);

        let mut dgamma = Tensor2::zeros(1, f);
        let mut dbeta = Tensor2::zeros(1, f);
        let mut dc = Tensor2::zeros(n, f);

        for j in 0..f {
            let s = sigma[j];
            let gam = ga[(0, j)];
            // u_j = Σ_i g_ij c_ij
            let mut u = 0.0;
            for i in 0..n {
                let c = ht[(i, j)] - al[(0, j)] * mu[j];
                u += g[(i, j)] * c;
                dgamma[(0, j)] += g[(i, j)] * c / s;
                dbeta[(0, j)] += g[(i, j)];
            }
            for i in 0..n {
                let c = ht[(i, j)] - al[(0, j)] * mu[j];
                dc[(i, j)] = gam * (g[(i, j)] / s - u * c / (n as f64 * s * s * s));
            }
        }

        let mut dh = Tensor2::zeros(n, f);
        let mut dalpha = Tensor2::zeros(1, f);
        for j in 0..f {
            let mut col_sum = 0.0;
            for i in 0..n {
                col_sum += dc[(i, j)];
            }
            dalpha[(0, j)] = -mu[j] * col_sum;
            for i in 0..n {
                dh[(i, j)] = dc[(i, j)] - al[(0, j)] * col_sum / n as f64;
            }
        }

        accumulate(grads, h, dh);
        accumulate(grads, alpha, dalpha);
        accumulate(grads, gamma, dgamma);
        accumulate(grads, beta, dbeta);
    }
}

fn row_norm(x: &[f64]) -> f64 {
    let ss: f64 = x.iter().map(|v| v * v).sum();
    (ss + L2_GUARD).sqrt()
}
