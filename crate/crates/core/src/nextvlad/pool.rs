use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, l2_normalize_backward, sigmoid_scalar, Matrix, NORM_EPS};
use crate::params::{gaussian, init_weight, Parameters};

/// Shape hyperparameters of one NeXtVLAD pooling network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    /// Per-frame feature size N.
    pub input_dim: usize,
    /// Expansion factor λ.
    pub expansion: usize,
    /// Group count G.
    pub groups: usize,
    /// Cluster count K.
    pub clusters: usize,
    /// Apply an extra L2 normalization over the whole pooled vector.
    pub global_norm: bool,
}

impl PoolConfig {
    pub fn new(
        input_dim: usize,
        expansion: usize,
        groups: usize,
        clusters: usize,
        global_norm: bool,
    ) -> Result<Self> {
        if input_dim == 0 || expansion == 0 || groups == 0 || clusters == 0 {
            return Err(Error::Config(format!(
                "pool dimensions must be positive (N={input_dim}, λ={expansion}, G={groups}, K={clusters})"
            )));
        }
        if (expansion * input_dim) % groups != 0 {
            return Err(Error::Config(format!(
                "expanded width λN={} is not divisible by G={groups}",
                expansion * input_dim
            )));
        }
        Ok(Self {
            input_dim,
            expansion,
            groups,
            clusters,
            global_norm,
        })
    }

    /// λN.
    pub fn expanded_dim(&self) -> usize {
        self.expansion * self.input_dim
    }

    /// λN / G, the feature width of one group slice.
    pub fn group_dim(&self) -> usize {
        self.expanded_dim() / self.groups
    }

    /// K · λN / G.
    pub fn output_dim(&self) -> usize {
        self.clusters * self.group_dim()
    }
}

/// Learnable tensors of one pooling network.
///
/// Attention vectors `w_g` are the columns of `attention_w`; assignment
/// vectors `w_gk` are the columns of `assign_w`, indexed `g * K + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub cfg: PoolConfig,
    /// N x λN
    pub expansion_w: Matrix,
    pub expansion_b: Matrix,
    /// λN x G
    pub attention_w: Matrix,
    pub attention_b: Matrix,
    /// λN x (G·K)
    pub assign_w: Matrix,
    pub assign_b: Matrix,
    /// K x (λN/G)
    pub centers: Matrix,
}

impl PoolParams {
    pub fn zeros(cfg: PoolConfig) -> Self {
        let d = cfg.expanded_dim();
        let gk = cfg.groups * cfg.clusters;
        Self {
            cfg,
            expansion_w: Matrix::zeros(cfg.input_dim, d),
            expansion_b: Matrix::zeros(1, d),
            attention_w: Matrix::zeros(d, cfg.groups),
            attention_b: Matrix::zeros(1, cfg.groups),
            assign_w: Matrix::zeros(d, gk),
            assign_b: Matrix::zeros(1, gk),
            centers: Matrix::zeros(cfg.clusters, cfg.group_dim()),
        }
    }

    pub fn init(cfg: PoolConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.expanded_dim();
        let gk = cfg.groups * cfg.clusters;
        Self {
            cfg,
            expansion_w: init_weight(cfg.input_dim, d, rng),
            expansion_b: Matrix::zeros(1, d),
            attention_w: init_weight(d, cfg.groups, rng),
            attention_b: Matrix::zeros(1, cfg.groups),
            assign_w: init_weight(d, gk, rng),
            assign_b: Matrix::zeros(1, gk),
            centers: gaussian(cfg.clusters, cfg.group_dim(), 1.0, rng),
        }
    }
}

impl Parameters for PoolParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix)) {
        f("expansion_w", &self.expansion_w);
        f("expansion_b", &self.expansion_b);
        f("attention_w", &self.attention_w);
        f("attention_b", &self.attention_b);
        f("assign_w", &self.assign_w);
        f("assign_b", &self.assign_b);
        f("centers", &self.centers);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("expansion_w", &mut self.expansion_w);
        f("expansion_b", &mut self.expansion_b);
        f("attention_w", &mut self.attention_w);
        f("attention_b", &mut self.attention_b);
        f("assign_w", &mut self.assign_w);
        f("assign_b", &mut self.assign_b);
        f("centers", &mut self.centers);
    }
}

/// Intermediate values of a forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct PoolingWorkspace {
    /// Input frames, M x N.
    pub frames: Matrix,
    /// Expanded frames ẋ, M x λN. Group g occupies columns `g*S .. (g+1)*S`.
    pub xdot: Matrix,
    /// Group attention α_g(ẋ_i), M x G.
    pub attention: Matrix,
    /// Soft assignment α_gk(ẋ_i), M x (G·K).
    pub assignment: Matrix,
    /// Un-normalized aggregation y, K x S.
    pub vlad: Matrix,
    /// Σ_{i,g} α_g α_gk per cluster.
    pub weight_sums: Vec<f64>,
    /// Intra-normalized aggregation ŷ, K x S.
    pub normalized: Matrix,
}

impl PoolingWorkspace {
    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }
}

/// Gradients of a pooling network: parameters and input frames.
#[derive(Clone, Debug)]
pub struct PoolGrads {
    pub params: PoolParams,
    pub frames: Matrix,
}

/// NeXtVLAD forward: expansion, grouping, group attention, soft cluster
/// assignment, residual aggregation and per-cluster L2 normalization.
/// Output is cluster-major, length `K · λN/G`.
pub fn nextvlad_pool_forward(
    frames: &Matrix,
    params: &PoolParams,
) -> Result<(Vec<f64>, PoolingWorkspace)> {
    let cfg = params.cfg;
    if frames.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "pool expects {} features per frame, got {}",
            cfg.input_dim,
            frames.cols()
        )));
    }
    if frames.rows() == 0 {
        return Err(Error::Shape("pooling needs at least one frame".into()));
    }
    let m = frames.rows();
    let (g_count, k_count, s) = (cfg.groups, cfg.clusters, cfg.group_dim());

    let mut xdot = frames.matmul(&params.expansion_w)?;
    xdot.add_row_broadcast(params.expansion_b.data())?;

    let mut attention = xdot.matmul(&params.attention_w)?;
    attention.add_row_broadcast(params.attention_b.data())?;
    attention.data_mut().iter_mut().for_each(|x| *x = sigmoid_scalar(*x));

    let mut assignment = xdot.matmul(&params.assign_w)?;
    assignment.add_row_broadcast(params.assign_b.data())?;
    for i in 0..m {
        for block in assignment.row_mut(i).chunks_exact_mut(k_count) {
            softmax_in_place(block);
        }
    }

    let mut vlad = Matrix::zeros(k_count, s);
    let mut weight_sums = vec![0.0; k_count];
    for i in 0..m {
        let x_row = xdot.row(i);
        let a_row = attention.row(i);
        let asg_row = assignment.row(i);
        for g in 0..g_count {
            let slice = &x_row[g * s..(g + 1) * s];
            for k in 0..k_count {
                let w = a_row[g] * asg_row[g * k_count + k];
                weight_sums[k] += w;
                for (y, x) in vlad.row_mut(k).iter_mut().zip(slice) {
                    *y += w * x;
                }
            }
        }
    }
    for (k, &ws) in weight_sums.iter().enumerate() {
        let c = params.centers.row(k).to_vec();
        for (y, cj) in vlad.row_mut(k).iter_mut().zip(&c) {
            *y -= ws * cj;
        }
    }

    let mut normalized = Matrix::zeros(k_count, s);
    for k in 0..k_count {
        let n = l2_normalize(vlad.row(k), NORM_EPS);
        normalized.row_mut(k).copy_from_slice(&n);
    }
    let output = if cfg.global_norm {
        l2_normalize(normalized.data(), NORM_EPS)
    } else {
        normalized.data().to_vec()
    };

    let ws = PoolingWorkspace {
        frames: frames.clone(),
        xdot,
        attention,
        assignment,
        vlad,
        weight_sums,
        normalized,
    };
    Ok((output, ws))
}

/// Analytic gradients for all pooling parameters and the input frames.
pub fn nextvlad_pool_backward(
    grad_out: &[f64],
    ws: &PoolingWorkspace,
    params: &PoolParams,
) -> Result<PoolGrads> {
    let mut grads = PoolParams::zeros(params.cfg);
    let frames = accumulate_pool_backward(grad_out, ws, params, &mut grads, true)?
        .expect("frame gradient requested");
    Ok(PoolGrads {
        params: grads,
        frames,
    })
}

/// Adds parameter gradients into `acc`; returns frame gradients when
/// `want_frames` is set.
pub(crate) fn accumulate_pool_backward(
    grad_out: &[f64],
    ws: &PoolingWorkspace,
    params: &PoolParams,
    acc: &mut PoolParams,
    want_frames: bool,
) -> Result<Option<Matrix>> {
    let cfg = params.cfg;
    let (g_count, k_count, s, d) = (
        cfg.groups,
        cfg.clusters,
        cfg.group_dim(),
        cfg.expanded_dim(),
    );
    let m = ws.frames.rows();
    if grad_out.len() != cfg.output_dim()
        || ws.frames.cols() != cfg.input_dim
        || ws.xdot.shape() != (m, d)
        || ws.attention.shape() != (m, g_count)
        || ws.assignment.shape() != (m, g_count * k_count)
        || ws.vlad.shape() != (k_count, s)
        || acc.cfg != cfg
    {
        return Err(Error::Contract(
            "pooling workspace does not match the parameters it is used with".into(),
        ));
    }

    let grad_norm = if cfg.global_norm {
        l2_normalize_backward(ws.normalized.data(), grad_out, NORM_EPS)
    } else {
        grad_out.to_vec()
    };
    let mut gy = Matrix::zeros(k_count, s);
    for k in 0..k_count {
        let g = l2_normalize_backward(ws.vlad.row(k), &grad_norm[k * s..(k + 1) * s], NORM_EPS);
        gy.row_mut(k).copy_from_slice(&g);
    }

    // y_k = Σ w (x - c_k)  ⇒  ∂/∂c_k = -Σw · gy_k
    for k in 0..k_count {
        let wsum = ws.weight_sums[k];
        for (gc, g) in acc.centers.row_mut(k).iter_mut().zip(gy.row(k)) {
            *gc -= wsum * g;
        }
    }
    let gy_dot_c: Vec<f64> = (0..k_count)
        .map(|k| crate::numerics::dot(gy.row(k), params.centers.row(k)))
        .collect();

    let mut g_xdot = Matrix::zeros(m, d);
    let mut g_att_logit = Matrix::zeros(m, g_count);
    let mut g_asg_logit = Matrix::zeros(m, g_count * k_count);
    let mut g_w = vec![0.0; k_count];
    for i in 0..m {
        let x_row = ws.xdot.row(i);
        for g in 0..g_count {
            let a = ws.attention.get(i, g);
            let slice = &x_row[g * s..(g + 1) * s];
            let asg = &ws.assignment.row(i)[g * k_count..(g + 1) * k_count];
            let gx_slice = &mut g_xdot.row_mut(i)[g * s..(g + 1) * s];
            let mut g_a = 0.0;
            for k in 0..k_count {
                let gyk = gy.row(k);
                g_w[k] = crate::numerics::dot(gyk, slice) - gy_dot_c[k];
                let w = a * asg[k];
                if w != 0.0 {
                    crate::numerics::axpy(w, gyk, gx_slice);
                }
                g_a += g_w[k] * asg[k];
            }
            g_att_logit.set(i, g, g_a * a * (1.0 - a));
            // softmax backward over k of (∂L/∂α_gk = g_w · a)
            let inner: f64 = (0..k_count).map(|k| asg[k] * g_w[k] * a).sum();
            let out = &mut g_asg_logit.row_mut(i)[g * k_count..(g + 1) * k_count];
            for k in 0..k_count {
                out[k] = asg[k] * (g_w[k] * a - inner);
            }
        }
    }

    acc.attention_w.add_assign(&ws.xdot.t_matmul(&g_att_logit)?)?;
    add_into_row(&mut acc.attention_b, &g_att_logit.col_sums());
    acc.assign_w.add_assign(&ws.xdot.t_matmul(&g_asg_logit)?)?;
    add_into_row(&mut acc.assign_b, &g_asg_logit.col_sums());
    g_xdot.add_assign(&g_att_logit.matmul_t(&params.attention_w)?)?;
    g_xdot.add_assign(&g_asg_logit.matmul_t(&params.assign_w)?)?;

    acc.expansion_w.add_assign(&ws.frames.t_matmul(&g_xdot)?)?;
    add_into_row(&mut acc.expansion_b, &g_xdot.col_sums());

    if want_frames {
        Ok(Some(g_xdot.matmul_t(&params.expansion_w)?))
    } else {
        Ok(None)
    }
}

fn add_into_row(dst: &mut Matrix, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    z.iter_mut().for_each(|x| *x /= sum);
}
