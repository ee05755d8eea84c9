use rand::Rng as _;

use super::{Activation, Decode, Model, ModelError, Result, TrialInput};
use crate::autodiff::{Tape, Tensor, Var};
use crate::graphs;
use crate::par::{self, Exec};
use crate::rng;

const LN_EPS: f64 = 1e-5;

/// Seeded inverted-dropout masks for one example at one step.
#[derive(Debug, Clone, Copy)]
pub struct DropoutMasks {
    pub seed: u64,
    pub step: u64,
    pub example: u64,
    pub p: f64,
}

impl DropoutMasks {
    fn mask(&self, site: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(self.seed, "dropout", &[self.step, self.example, site]);
        let keep = 1.0 / (1.0 - self.p);
        (0..n)
            .map(|_| if r.random::<f64>() < self.p { 0.0 } else { keep })
            .collect()
    }
}

/// Per-branch logits of one example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchLogits {
    pub z_a: Option<Vec<f64>>,
    pub z_b: Option<Vec<f64>>,
    pub z_c: Option<Vec<f64>>,
}

/// Tape handles produced by [`Model::forward`]; every logit var is `(1, K)`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub z_a: Option<Var>,
    pub z_b: Option<Var>,
    pub z_c: Option<Var>,
    pub fused: Var,
}

impl ForwardOutput {
    pub fn branch_logits(&self, tape: &Tape) -> BranchLogits {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).data.clone());
        BranchLogits {
            z_a: get(self.z_a),
            z_b: get(self.z_b),
            z_c: get(self.z_c),
        }
    }
}

/// Effective adjacencies fed to the graph layers.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphVars {
    pub a_ccg: Option<Var>,
    pub a_tsg: Option<Var>,
    pub b_ccg: Option<Var>,
    pub b_tsg: Option<Var>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `σ(A · H · W)` for a node-feature matrix `H: (n, d)`.
pub fn gcn_layer(tape: &mut Tape, h: Var, a: Var, w: Var, act: Activation) -> Result<Var> {
    let ah = tape.matmul(a, h)?;
    let ahw = tape.matmul(ah, w)?;
    Ok(activate(tape, ahw, act))
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

struct Ctx<'a> {
    model: &'a Model,
    vars: &'a [Var],
    drop: Option<&'a DropoutMasks>,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.model
            .params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::InvalidHyper(format!("missing parameter {name}")))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, site: u64) -> Result<Var> {
        match self.drop {
            Some(d) if d.p > 0.0 => {
                let n = tape.value(x).numel();
                Ok(tape.dropout(x, d.mask(site, n))?)
            }
            _ => Ok(x),
        }
    }

    fn act(&self) -> Activation {
        self.model.hyper.activation
    }

    /// Graph propagation over the leading axis of `x: (n, m, d)`, one layer
    /// per weight, sharing `adj` across the middle axis.
    fn graph_stack(&self, tape: &mut Tape, mut x: Var, adj: Var, weights: &[String]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, m, d) = (s[0], s[1], s[2]);
        for name in weights {
            let w = self.p(name)?;
            let flat = tape.reshape(x, &[n, m * d])?;
            let ah = tape.matmul(adj, flat)?;
            let rows = tape.reshape(ah, &[n * m, d])?;
            let ahw = tape.matmul(rows, w)?;
            let y = activate(tape, ahw, self.act());
            x = tape.reshape(y, &[n, m, d])?;
        }
        Ok(x)
    }

    /// Shared temporal block on `(C, d, W)`; returns `(C, W, d)`.
    fn temporal(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let dw = self.p("temporal.dw")?;
        let pw = self.p("temporal.pw")?;
        let pb = self.p("temporal.pw_bias")?;
        let y = tape.conv1d_depthwise(x, dw)?;
        let y = tape.conv1d_pointwise(y, pw, Some(pb))?;
        let y = tape.gelu(y);
        let y = tape.permute(y, &[0, 2, 1])?;
        if !self.model.hyper.temporal_norm {
            return Ok(y);
        }
        let y = tape.layer_norm(y, LN_EPS);
        let scale = self.p("temporal.ln_scale")?;
        let shift = self.p("temporal.ln_shift")?;
        let y = tape.mul(y, scale)?;
        Ok(tape.add(y, shift)?)
    }

    fn head(&self, tape: &mut Tape, feat: Var, prefix: &str, site: u64) -> Result<Var> {
        let n = tape.value(feat).numel();
        let f = tape.reshape(feat, &[1, n])?;
        let f = self.dropout(tape, f, site)?;
        let w = self.p(&format!("{prefix}.head.w"))?;
        let b = self.p(&format!("{prefix}.head.b"))?;
        let z = tape.matmul(f, w)?;
        Ok(tape.add(z, b)?)
    }

    /// `(W, C, T_w)` windows → `(C, W, d)` channel-node features, one
    /// projection per channel.
    fn project(&self, tape: &mut Tape, x: Var, prefix: &str, site: u64) -> Result<Var> {
        let by_channel = tape.permute(x, &[1, 0, 2])?;
        let proj = self.p(&format!("{prefix}.proj"))?;
        let y = tape.bmm(by_channel, proj)?;
        self.dropout(tape, y, site)
    }

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|l| format!("{prefix}.{l}")).collect()
    }

    fn branch_a(&self, tape: &mut Tape, x: Var, a_ccg: Var, s_tsg: Var) -> Result<Var> {
        let h = &self.model.hyper;
        let by_channel = self.project(tape, x, "a", 0)?; // (C, W, d)
        let ccg = self.graph_stack(tape, by_channel, a_ccg, &Self::names("a.ccg", h.k_s))?;
        let tin = tape.permute(ccg, &[0, 2, 1])?; // (C, d, W)
        let t = self.temporal(tape, tin)?; // (C, W, d)
        let slices = tape.mean_axis(t, 0)?; // (W, d)
        let (w, d) = (h.n_windows(), h.d);
        let slices = tape.reshape(slices, &[w, 1, d])?;
        let tsg = self.graph_stack(tape, slices, s_tsg, &Self::names("a.tsg", h.k_t))?;
        let flat = tape.reshape(tsg, &[w, d])?;
        let pooled = tape.mean_axis(flat, 0)?;
        self.head(tape, pooled, "a", 1)
    }

    fn branch_b(&self, tape: &mut Tape, x: Var, a_ccg: Var, s_tsg: Var) -> Result<Var> {
        let h = &self.model.hyper;
        let x0 = self.project(tape, x, "b", 2)?;
        let x0 = tape.permute(x0, &[1, 0, 2])?; // (W, C, d)
        let tsg = self.graph_stack(tape, x0, s_tsg, &Self::names("b.tsg", h.k_t))?;
        let tin = tape.permute(tsg, &[1, 2, 0])?; // (C, d, W)
        let t = self.temporal(tape, tin)?; // (C, W, d): channel-major
        let ccg = self.graph_stack(tape, t, a_ccg, &Self::names("b.ccg", h.k_s))?;
        let per_slice = tape.mean_axis(ccg, 0)?;
        let pooled = tape.mean_axis(per_slice, 0)?;
        self.head(tape, pooled, "b", 3)
    }

    fn branch_c(&self, tape: &mut Tape, input: &TrialInput) -> Result<Var> {
        let h = &self.model.hyper;
        let m = h.mfm.width;
        let mut combined: Option<Var> = None;
        for (img, &(_, weight)) in input.images.iter().zip(&input.periods) {
            let feat = self.mfm_image(tape, img)?;
            let feat = tape.scale(feat, weight);
            combined = Some(match combined {
                Some(acc) => tape.add(acc, feat)?,
                None => feat,
            });
        }
        let feat =
            combined.ok_or_else(|| ModelError::InputMismatch("branch C needs at least one envelope image".into()))?;
        debug_assert_eq!(tape.value(feat).numel(), m);
        self.head(tape, feat, "c", 4)
    }

    /// Multi-scale mixer on one `(C, p, q)` envelope image; returns `(m)`.
    fn mfm_image(&self, tape: &mut Tape, img: &Tensor) -> Result<Var> {
        let h = &self.model.hyper;
        let cfg = &h.mfm;
        let m = cfg.width;
        if img.shape.len() != 3 || img.shape[0] != h.n_channels {
            return Err(ModelError::InputMismatch(format!(
                "envelope image {:?} for {} channels",
                img.shape, h.n_channels
            )));
        }
        let (c, p, q0) = (img.shape[0], img.shape[1], img.shape[2]);
        let x = tape.constant(img.clone());
        let x = tape.reshape(x, &[1, c, p * q0])?;
        let ew = self.p("c.embed.w")?;
        let eb = self.p("c.embed.b")?;
        let x = tape.conv1d_pointwise(x, ew, Some(eb))?;
        let mut cur = tape.reshape(x, &[m, p, q0])?;

        let mut qs = vec![q0];
        let mut scales = Vec::with_capacity(cfg.n_downsample + 1);
        for s in 0..=cfg.n_downsample {
            if s > 0 {
                let (qa, qb) = (qs[s - 1], qs[s - 1].div_ceil(2));
                let flat = tape.reshape(cur, &[m * p, qa])?;
                let y = pair_mean(tape, flat)?;
                cur = tape.reshape(y, &[m, p, qb])?;
                qs.push(qb);
            }
            let mut y = cur;
            for blk in 0..cfg.n_blocks {
                y = self.axis_conv(tape, y, &format!("c.s{s}.b{blk}.seasonal"), true)?;
                y = self.axis_conv(tape, y, &format!("c.s{s}.b{blk}.trend"), false)?;
            }
            scales.push(y);
        }

        let mut z = scales[cfg.n_downsample];
        for s in (0..cfg.n_downsample).rev() {
            let (qf, qc) = (qs[s], qs[s + 1]);
            let flat = tape.reshape(z, &[1, m, p * qc])?;
            let w = self.p(&format!("c.mix.{s}.w"))?;
            let b = self.p(&format!("c.mix.{s}.b"))?;
            let mixed = tape.conv1d_pointwise(flat, w, Some(b))?;
            let mixed = tape.gelu(mixed);
            let rows = tape.reshape(mixed, &[m * p, qc])?;
            let up = repeat_pairs(tape, rows, qf)?;
            let up = tape.reshape(up, &[m, p, qf])?;
            z = tape.add(scales[s], up)?;
        }
        let flat = tape.reshape(z, &[m, p * qs[0]])?;
        Ok(tape.mean_axis(flat, 1)?)
    }

    /// Residual depthwise convolution along the intra-period axis
    /// (`seasonal = true`) or the inter-period axis of `(m, p, q)`.
    fn axis_conv(&self, tape: &mut Tape, y: Var, name: &str, seasonal: bool) -> Result<Var> {
        let k = self.p(name)?;
        let (to, back): (&[usize], &[usize]) = if seasonal {
            (&[2, 0, 1], &[1, 2, 0])
        } else {
            (&[1, 0, 2], &[1, 0, 2])
        };
        let t = tape.permute(y, to)?;
        let t = tape.conv1d_depthwise(t, k)?;
        let t = tape.gelu(t);
        let t = tape.permute(t, back)?;
        Ok(tape.add(y, t)?)
    }

    fn fuse(&self, tape: &mut Tape, zs: &[Var]) -> Result<Var> {
        let b = self.p("fusion.b")?;
        if self.model.hyper.gated_fusion {
            let g = self.p("fusion.gate")?;
            let g = tape.reshape(g, &[1, zs.len()])?;
            let g = tape.softmax(g);
            let mut acc: Option<Var> = None;
            for (i, &z) in zs.iter().enumerate() {
                let gi = tape.slice(g, 1, i, 1)?;
                let term = tape.mul(z, gi)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            return Ok(tape.add(acc.expect("at least one branch"), b)?);
        }
        let w = self.p("fusion.w")?;
        let cat = tape.concat(zs, 1)?;
        let wt = tape.transpose(w)?;
        let z = tape.matmul(cat, wt)?;
        Ok(tape.add(z, b)?)
    }
}

/// Average adjacent column pairs of `(rows, q)`; an odd last column is kept.
fn pair_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let (rows, q) = (tape.shape(x)[0], tape.shape(x)[1]);
    let even = q / 2 * 2;
    let mut parts = Vec::with_capacity(2);
    if even > 0 {
        let head = if even == q { x } else { tape.slice(x, 1, 0, even)? };
        let pairs = tape.reshape(head, &[rows, even / 2, 2])?;
        parts.push(tape.mean_axis(pairs, 2)?);
    }
    if q % 2 == 1 {
        parts.push(tape.slice(x, 1, q - 1, 1)?);
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    })
}

/// Nearest-neighbour 2x upsampling of `(rows, q)` columns, cut to `target`.
fn repeat_pairs(tape: &mut Tape, x: Var, target: usize) -> Result<Var> {
    let (rows, q) = (tape.shape(x)[0], tape.shape(x)[1]);
    let col = tape.reshape(x, &[rows, q, 1])?;
    let both = tape.concat(&[col, col], 2)?;
    let wide = tape.reshape(both, &[rows, 2 * q])?;
    Ok(if 2 * q == target {
        wide
    } else {
        tape.slice(wide, 1, 0, target)?
    })
}

impl Model {
    /// Put every parameter on the tape; `trainable[i]` selects leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: Option<&[bool]>) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| match trainable {
                Some(tr) if tr[i] => tape.leaf(t.clone()),
                _ => tape.constant(t.clone()),
            })
            .collect()
    }

    /// Effective adjacencies recorded on the tape from the bound increments.
    pub fn graph_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<GraphVars> {
        let h = &self.hyper;
        let mut g = GraphVars::default();
        if !(h.branches.a || h.branches.b) {
            return Ok(g);
        }
        let ccg = tape.constant(self.ccg_base.clone());
        let tsg = tape.constant(self.tsg_base.clone());
        let var = |name: &str| self.params.position(name).map(|i| vars[i]);
        let eff = |tape: &mut Tape, base: Var, name: &str| -> Result<Option<Var>> {
            match var(name) {
                Some(d) => Ok(Some(graphs::effective_adjacency_on_tape(tape, base, d)?)),
                None => Ok(None),
            }
        };
        if h.branches.a {
            g.a_ccg = eff(tape, ccg, "a.ccg_delta")?;
            g.a_tsg = eff(tape, tsg, "a.tsg_delta")?;
        }
        if h.branches.b {
            g.b_ccg = if h.tie_ccg_delta && h.branches.a {
                g.a_ccg
            } else {
                eff(tape, ccg, "b.ccg_delta")?
            };
            g.b_tsg = eff(tape, tsg, "b.tsg_delta")?;
        }
        Ok(g)
    }

    /// Full forward pass for one example.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &TrialInput,
        drop: Option<&DropoutMasks>,
    ) -> Result<ForwardOutput> {
        let g = self.graph_vars(tape, vars)?;
        self.forward_with_graphs(tape, vars, input, drop, &g)
    }

    /// [`Model::forward`] with caller-supplied adjacencies, which can be
    /// shared across the examples of one tape.
    pub fn forward_with_graphs(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &TrialInput,
        drop: Option<&DropoutMasks>,
        g: &GraphVars,
    ) -> Result<ForwardOutput> {
        let h = &self.hyper;
        if vars.len() != self.params.len() {
            return Err(ModelError::InputMismatch(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let want = [h.n_windows(), h.n_channels, h.window_len];
        if input.windows.shape != want {
            return Err(ModelError::InputMismatch(format!(
                "windows {:?}, expected {want:?}",
                input.windows.shape
            )));
        }
        let ctx = Ctx {
            model: self,
            vars,
            drop,
        };
        let missing = || ModelError::InputMismatch("adjacency not bound".into());
        let mut out = ForwardOutput {
            z_a: None,
            z_b: None,
            z_c: None,
            fused: vars[0],
        };
        let mut zs = Vec::with_capacity(3);
        if h.branches.a || h.branches.b {
            let x = tape.constant(input.windows.clone());
            if h.branches.a {
                let (a, s) = (g.a_ccg.ok_or_else(missing)?, g.a_tsg.ok_or_else(missing)?);
                let z = ctx.branch_a(tape, x, a, s)?;
                out.z_a = Some(z);
                zs.push(z);
            }
            if h.branches.b {
                let (a, s) = (g.b_ccg.ok_or_else(missing)?, g.b_tsg.ok_or_else(missing)?);
                let z = ctx.branch_b(tape, x, a, s)?;
                out.z_b = Some(z);
                zs.push(z);
            }
        }
        if h.branches.c {
            let z = ctx.branch_c(tape, input)?;
            out.z_c = Some(z);
            zs.push(z);
        }
        out.fused = ctx.fuse(tape, &zs)?;
        Ok(out)
    }

    fn infer(&self, input: &TrialInput, f32_mode: bool) -> Result<(BranchLogits, Vec<f64>)> {
        let mut tape = if f32_mode {
            Tape::with_f32_rounding()
        } else {
            Tape::new()
        };
        let vars = self.bind(&mut tape, None);
        let out = self.forward(&mut tape, &vars, input, None)?;
        Ok((out.branch_logits(&tape), tape.value(out.fused).data.clone()))
    }

    /// Inference logits (no dropout): per branch and fused.
    pub fn logits(&self, input: &TrialInput) -> Result<(BranchLogits, Vec<f64>)> {
        self.infer(input, false)
    }

    /// [`Model::logits`] with every intermediate rounded to f32.
    pub fn logits_f32(&self, input: &TrialInput) -> Result<(BranchLogits, Vec<f64>)> {
        self.infer(input, true)
    }

    /// Class decision from already computed logits.
    pub fn decide(&self, branches: &BranchLogits, fused: &[f64]) -> usize {
        match (self.hyper.decode, &branches.z_a) {
            (Decode::BranchA, Some(za)) => argmax(za),
            _ => argmax(fused),
        }
    }

    pub fn predict(&self, input: &TrialInput) -> Result<usize> {
        let (branches, fused) = self.logits(input)?;
        Ok(self.decide(&branches, &fused))
    }

    pub fn predict_all(&self, inputs: &[TrialInput], exec: Exec) -> Result<Vec<usize>> {
        par::map_slice(exec, inputs, |x| self.predict(x)).into_iter().collect()
    }
}
