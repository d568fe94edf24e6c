//! Encoder-decoder transformer whose feed-forward sublayers may be expert
//! banks. Pre-norm residual blocks, sinusoidal positions, ReLU experts.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{GateMode, MoeConfig};
use super::params::{ParamId, ParamStore, ParamVars};
use super::Side;
use crate::error::{Error, Result};
use crate::tasks::TaskId;
use crate::tensor::{AttentionMask, Graph, Tensor, Var};
use crate::vocab::{TokenId, PAD};

pub(crate) const LN_EPS: f64 = 1e-5;

/// A graph under construction plus the parameters bound to it.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    vars: ParamVars,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Ctx {
            g,
            store,
            vars: ParamVars::new(store, trainable),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.vars.bind(self.g, self.store, id)
    }

    pub fn preset(&mut self, id: ParamId, v: Var) {
        self.vars.preset(id, v);
    }

    pub fn into_vars(self) -> ParamVars {
        self.vars
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: store.init_normal(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?,
            b: Some(store.init_const(format!("{name}.b"), &[fan_out], 0.0)?),
        })
    }

    /// Projection without bias.
    fn init_plain<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: store.init_normal(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?,
            b: None,
        })
    }

    fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let h = ctx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.g.add_row(h, b)
            }
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.init_const(format!("{name}.gain"), &[d], 1.0)?,
            bias: store.init_const(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.g.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, cfg: &MoeConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Attention {
            q: Linear::init(store, &format!("{name}.q"), d, d, rng)?,
            // a key bias shifts every score of a query equally, so it is omitted
            k: Linear::init_plain(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::init(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::init(store, &format!("{name}.o"), d, d, rng)?,
            heads: cfg.n_heads,
        })
    }

    fn apply(&self, ctx: &mut Ctx, xq: Var, xkv: Var, mask: &AttentionMask) -> Result<Var> {
        let q = self.q.apply(ctx, xq)?;
        let k = self.k.apply(ctx, xkv)?;
        let v = self.v.apply(ctx, xkv)?;
        let a = ctx.g.attention(q, k, v, self.heads, mask)?;
        self.o.apply(ctx, a)
    }
}

/// One feed-forward expert: `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, cfg: &MoeConfig, rng: &mut R) -> Result<Self> {
        Ok(Ffn {
            up: Linear::init(store, &format!("{name}.up"), cfg.d_model, cfg.d_ff, rng)?,
            down: Linear::init(store, &format!("{name}.down"), cfg.d_ff, cfg.d_model, rng)?,
        })
    }

    fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.apply(ctx, x)?;
        let h = ctx.g.relu(h)?;
        self.down.apply(ctx, h)
    }
}

/// Task-conditioned router: a task embedding projected to expert logits.
#[derive(Clone, Debug)]
pub(crate) struct Router {
    pub task_emb: ParamId,
    pub proj: ParamId,
}

/// Top-2 by logit, descending; ties go to the lower index.
pub(crate) fn top2(logits: &[f64]) -> [usize; 2] {
    let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let second = (0..logits.len())
        .filter(|&i| i != best)
        .fold(None, |b: Option<usize>, i| match b {
            Some(j) if logits[i] <= logits[j] => Some(j),
            _ => Some(i),
        })
        .expect("at least two experts");
    [best, second]
}

impl Router {
    /// Gate var `[1 x 2]` and the selected experts for `task`.
    pub fn gates(&self, ctx: &mut Ctx, task: TaskId, mode: GateMode) -> Result<(Var, [usize; 2])> {
        let (emb, proj) = (ctx.p(self.task_emb), ctx.p(self.proj));
        let row = ctx.g.gather_rows(emb, &[task.0])?;
        let logits = ctx.g.matmul(row, proj)?;
        let experts = top2(ctx.g.value(logits).data());
        let gates = match mode {
            GateMode::Renormalized => {
                let picked = ctx.g.take(logits, &experts, vec![1, 2])?;
                ctx.g.softmax(picked, 1)?
            }
            GateMode::Truncated => {
                let probs = ctx.g.softmax(logits, 1)?;
                ctx.g.take(probs, &experts, vec![1, 2])?
            }
        };
        Ok((gates, experts))
    }
}

#[derive(Clone, Debug)]
pub(crate) enum FfnBlock {
    Dense(Ffn),
    Moe {
        experts: Vec<Ffn>,
        router: Router,
    },
    /// A task's routed experts with frozen gates, in ascending expert index.
    Fixed {
        experts: Vec<(usize, Ffn, f64)>,
    },
}

impl FfnBlock {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, layer: usize, cfg: &MoeConfig, rng: &mut R) -> Result<Self> {
        if !cfg.is_moe_layer(layer) {
            return Ok(FfnBlock::Dense(Ffn::init(store, name, cfg, rng)?));
        }
        let experts = (0..cfg.n_experts)
            .map(|e| Ffn::init(store, &format!("{name}.expert.{e}"), cfg, rng))
            .collect::<Result<_>>()?;
        let router = Router {
            task_emb: store.init_normal(format!("{name}.router.task_emb"), &[cfg.n_tasks, cfg.d_task], 1, rng)?,
            proj: store.init_normal(format!("{name}.router.proj"), &[cfg.d_task, cfg.n_experts], cfg.d_task, rng)?,
        };
        Ok(FfnBlock::Moe { experts, router })
    }

    /// Sums `gate * expert(x)` into zeros, visiting experts in ascending
    /// index so MoE and extracted blocks share the same arithmetic.
    fn mix(ctx: &mut Ctx, x: Var, terms: Vec<(&Ffn, Vec<usize>, Var)>) -> Result<Var> {
        let shape = ctx.g.value(x).shape().to_vec();
        let mut out = ctx.g.constant(Tensor::zeros(&shape));
        for (ffn, rows, gate) in terms {
            let xe = ctx.g.gather_rows(x, &rows)?;
            let h = ffn.apply(ctx, xe)?;
            let h = ctx.g.mul_rows(h, gate)?;
            out = ctx.g.index_add_rows(out, h, &rows)?;
        }
        Ok(out)
    }

    fn apply(&self, ctx: &mut Ctx, x: Var, route: &RouteInput, aux: &mut Vec<Var>, gating: GateMode, balance: bool) -> Result<Var> {
        let rows_total = ctx.g.value(x).rows();
        match self {
            FfnBlock::Dense(ffn) => ffn.apply(ctx, x),
            FfnBlock::Fixed { experts } => {
                let rows: Vec<usize> = (0..rows_total).collect();
                let mut terms = Vec::with_capacity(experts.len());
                for (_, ffn, g) in experts {
                    let gate = ctx.g.constant(Tensor::filled(&[rows_total, 1], *g));
                    terms.push((ffn, rows.clone(), gate));
                }
                Self::mix(ctx, x, terms)
            }
            FfnBlock::Moe { experts, router } => {
                let tasks = route.tasks.ok_or_else(|| Error::config("a routed model needs one task id per sequence"))?;
                let mut local: BTreeMap<TaskId, usize> = BTreeMap::new();
                for &t in tasks {
                    let next = local.len();
                    local.entry(t).or_insert(next);
                }
                let mut picks = vec![[0usize; 2]; local.len()];
                let mut gate_rows = vec![None; local.len()];
                for (&t, &i) in &local {
                    let (g, e) = router.gates(ctx, t, gating)?;
                    gate_rows[i] = Some(g);
                    picks[i] = e;
                }
                let gate_rows: Vec<Var> = gate_rows.into_iter().map(|g| g.expect("every task routed")).collect();
                let table = ctx.g.concat_rows(&gate_rows)?;

                if balance {
                    aux.push(importance_penalty(ctx, table, tasks, &local, &picks, experts.len())?);
                }

                let len = route.seq_len;
                let mut terms = Vec::new();
                for (e, ffn) in experts.iter().enumerate() {
                    let mut rows = Vec::new();
                    let mut gidx = Vec::new();
                    for (s, t) in tasks.iter().enumerate() {
                        let li = local[t];
                        if let Some(slot) = picks[li].iter().position(|&p| p == e) {
                            rows.extend(s * len..(s + 1) * len);
                            gidx.extend(std::iter::repeat_n(li * 2 + slot, len));
                        }
                    }
                    if rows.is_empty() {
                        continue;
                    }
                    let gate = ctx.g.take(table, &gidx, vec![rows.len(), 1])?;
                    terms.push((ffn, rows, gate));
                }
                Self::mix(ctx, x, terms)
            }
        }
    }
}

/// `n_experts * sum_e importance_e^2`, where importance is the batch-average
/// gate mass per expert. Equals 1 for perfectly even use.
fn importance_penalty(
    ctx: &mut Ctx,
    table: Var,
    tasks: &[TaskId],
    local: &BTreeMap<TaskId, usize>,
    picks: &[[usize; 2]],
    n_experts: usize,
) -> Result<Var> {
    let n = local.len();
    let mut scatter = vec![0.0; 2 * n * n_experts];
    for t in tasks {
        let li = local[t];
        for slot in 0..2 {
            scatter[(li * 2 + slot) * n_experts + picks[li][slot]] += 1.0 / tasks.len() as f64;
        }
    }
    let m = ctx.g.constant(Tensor::new(vec![2 * n, n_experts], scatter)?);
    let flat = ctx.g.reshape(table, vec![1, 2 * n])?;
    let imp = ctx.g.matmul(flat, m)?;
    let sq = ctx.g.mul(imp, imp)?;
    let s = ctx.g.sum(sq)?;
    ctx.g.scale(s, n_experts as f64)
}

struct RouteInput<'t> {
    tasks: Option<&'t [TaskId]>,
    seq_len: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    pub ffn: FfnBlock,
    norm2: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    pub ffn: FfnBlock,
    norm3: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Network {
    embed: ParamId,
    out: Linear,
    pub enc: Vec<EncoderLayer>,
    pub dec: Vec<DecoderLayer>,
    enc_norm: Norm,
    dec_norm: Norm,
}

/// Output of one forward pass.
pub(crate) struct Forward {
    /// `[batch * tgt_len, vocab]`
    pub logits: Var,
    pub tgt_len: usize,
    /// Per-block balancing penalties (empty unless requested).
    pub aux: Vec<Var>,
}

fn sinusoid(len: usize, batch: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for pos in 0..len {
            for i in 0..d {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let a = pos as f64 * rate;
                data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    Tensor::new(vec![batch * len, d], data).expect("positive sizes")
}

/// Pads sequences to a common length. Returns flat ids and per-slot validity.
fn pad(seqs: &[Vec<TokenId>]) -> (Vec<usize>, Vec<bool>, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        for i in 0..len {
            ids.push(s.get(i).map_or(PAD as usize, |&t| t as usize));
            valid.push(i < s.len());
        }
    }
    (ids, valid, len)
}

impl Network {
    pub fn init<R: Rng>(cfg: &MoeConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let embed = store.init_normal("embed".into(), &[cfg.vocab_size, d], 1, rng)?;
        let mut enc = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("enc.{l}");
            enc.push(EncoderLayer {
                attn: Attention::init(store, &format!("{p}.attn"), cfg, rng)?,
                norm1: Norm::init(store, &format!("{p}.norm1"), d)?,
                ffn: FfnBlock::init(store, &format!("{p}.ffn"), l, cfg, rng)?,
                norm2: Norm::init(store, &format!("{p}.norm2"), d)?,
            });
        }
        let mut dec = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("dec.{l}");
            dec.push(DecoderLayer {
                self_attn: Attention::init(store, &format!("{p}.attn"), cfg, rng)?,
                norm1: Norm::init(store, &format!("{p}.norm1"), d)?,
                cross_attn: Attention::init(store, &format!("{p}.cross"), cfg, rng)?,
                norm2: Norm::init(store, &format!("{p}.norm2"), d)?,
                ffn: FfnBlock::init(store, &format!("{p}.ffn"), l, cfg, rng)?,
                norm3: Norm::init(store, &format!("{p}.norm3"), d)?,
            });
        }
        Ok(Network {
            embed,
            enc_norm: Norm::init(store, "enc.norm", d)?,
            dec_norm: Norm::init(store, "dec.norm", d)?,
            out: Linear::init(store, "out", d, cfg.vocab_size, rng)?,
            enc,
            dec,
        })
    }

    /// Rebinds a network skeleton to parameters looked up by name.
    pub fn bind(cfg: &MoeConfig, store: &ParamStore, fixed: Option<&BTreeMap<(Side, usize), Vec<(usize, f64)>>>) -> Result<Self> {
        let get = |name: String| {
            store.id(&name).ok_or_else(|| Error::config(format!("missing parameter {name}")))
        };
        let linear = |name: String| -> Result<Linear> {
            Ok(Linear {
                w: get(format!("{name}.w"))?,
                b: Some(get(format!("{name}.b"))?),
            })
        };
        let plain = |name: String| -> Result<Linear> {
            Ok(Linear {
                w: get(format!("{name}.w"))?,
                b: None,
            })
        };
        let norm = |name: String| -> Result<Norm> {
            Ok(Norm {
                gain: get(format!("{name}.gain"))?,
                bias: get(format!("{name}.bias"))?,
            })
        };
        let attention = |name: String| -> Result<Attention> {
            Ok(Attention {
                q: linear(format!("{name}.q"))?,
                k: plain(format!("{name}.k"))?,
                v: linear(format!("{name}.v"))?,
                o: linear(format!("{name}.o"))?,
                heads: cfg.n_heads,
            })
        };
        let ffn = |name: String| -> Result<Ffn> {
            Ok(Ffn {
                up: linear(format!("{name}.up"))?,
                down: linear(format!("{name}.down"))?,
            })
        };
        let block = |side: Side, l: usize| -> Result<FfnBlock> {
            let name = format!("{}.{l}.ffn", side.prefix());
            if !cfg.is_moe_layer(l) {
                return Ok(FfnBlock::Dense(ffn(name)?));
            }
            if let Some(fixed) = fixed {
                let chosen = fixed
                    .get(&(side, l))
                    .ok_or_else(|| Error::config(format!("missing frozen gates for {name}")))?;
                let experts = chosen
                    .iter()
                    .map(|&(e, g)| Ok((e, ffn(format!("{name}.expert.{e}"))?, g)))
                    .collect::<Result<_>>()?;
                return Ok(FfnBlock::Fixed { experts });
            }
            Ok(FfnBlock::Moe {
                experts: (0..cfg.n_experts)
                    .map(|e| ffn(format!("{name}.expert.{e}")))
                    .collect::<Result<_>>()?,
                router: Router {
                    task_emb: get(format!("{name}.router.task_emb"))?,
                    proj: get(format!("{name}.router.proj"))?,
                },
            })
        };
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("enc.{l}");
            enc.push(EncoderLayer {
                attn: attention(format!("{p}.attn"))?,
                norm1: norm(format!("{p}.norm1"))?,
                ffn: block(Side::Encoder, l)?,
                norm2: norm(format!("{p}.norm2"))?,
            });
            let p = format!("dec.{l}");
            dec.push(DecoderLayer {
                self_attn: attention(format!("{p}.attn"))?,
                norm1: norm(format!("{p}.norm1"))?,
                cross_attn: attention(format!("{p}.cross"))?,
                norm2: norm(format!("{p}.norm2"))?,
                ffn: block(Side::Decoder, l)?,
                norm3: norm(format!("{p}.norm3"))?,
            });
        }
        Ok(Network {
            embed: get("embed".into())?,
            out: linear("out".into())?,
            enc_norm: norm("enc.norm".into())?,
            dec_norm: norm("dec.norm".into())?,
            enc,
            dec,
        })
    }

    pub fn block(&self, side: Side, layer: usize) -> Option<&FfnBlock> {
        match side {
            Side::Encoder => self.enc.get(layer).map(|l| &l.ffn),
            Side::Decoder => self.dec.get(layer).map(|l| &l.ffn),
        }
    }

    fn embed(&self, ctx: &mut Ctx, ids: &[usize], batch: usize, len: usize, d: usize) -> Result<Var> {
        let table = ctx.p(self.embed);
        let x = ctx.g.gather_rows(table, ids)?;
        let pe = ctx.g.constant(sinusoid(len, batch, d));
        ctx.g.add(x, pe)
    }

    /// Teacher-forced forward pass. `tgt_in` starts with `<s>`; sequences are
    /// padded to the batch maximum.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        cfg: &MoeConfig,
        src: &[Vec<TokenId>],
        tgt_in: &[Vec<TokenId>],
        tasks: Option<&[TaskId]>,
        balance: bool,
    ) -> Result<Forward> {
        let batch = src.len();
        if batch == 0 || tgt_in.len() != batch || tasks.is_some_and(|t| t.len() != batch) {
            return Err(Error::Shape {
                op: "forward batch",
                left: vec![src.len(), tgt_in.len()],
                right: vec![tasks.map_or(0, <[TaskId]>::len)],
            });
        }
        for s in src.iter().chain(tgt_in) {
            if s.is_empty() || s.len() > cfg.max_len {
                return Err(Error::config(format!(
                    "sequence length {} outside 1..={}",
                    s.len(),
                    cfg.max_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: bad as usize,
                    size: cfg.vocab_size,
                });
            }
        }
        if let Some(&bad) = tasks.and_then(|t| t.iter().find(|t| t.0 >= cfg.n_tasks)) {
            return Err(Error::Index {
                what: "tasks",
                index: bad.0,
                size: cfg.n_tasks,
            });
        }

        let d = cfg.d_model;
        let mut aux = Vec::new();
        let (src_ids, src_valid, ls) = pad(src);
        let (tgt_ids, tgt_valid, lt) = pad(tgt_in);

        let enc_mask = AttentionMask {
            batch,
            q_len: ls,
            k_len: ls,
            key_valid: src_valid.clone(),
            causal: false,
        };
        let mut x = self.embed(ctx, &src_ids, batch, ls, d)?;
        let route = RouteInput { tasks, seq_len: ls };
        for layer in &self.enc {
            let h = layer.norm1.apply(ctx, x)?;
            let h = layer.attn.apply(ctx, h, h, &enc_mask)?;
            x = ctx.g.add(x, h)?;
            let h = layer.norm2.apply(ctx, x)?;
            let h = layer.ffn.apply(ctx, h, &route, &mut aux, cfg.gating, balance)?;
            x = ctx.g.add(x, h)?;
        }
        let memory = self.enc_norm.apply(ctx, x)?;

        let self_mask = AttentionMask {
            batch,
            q_len: lt,
            k_len: lt,
            key_valid: tgt_valid,
            causal: true,
        };
        let cross_mask = AttentionMask {
            batch,
            q_len: lt,
            k_len: ls,
            key_valid: src_valid,
            causal: false,
        };
        let mut y = self.embed(ctx, &tgt_ids, batch, lt, d)?;
        let route = RouteInput { tasks, seq_len: lt };
        for layer in &self.dec {
            let h = layer.norm1.apply(ctx, y)?;
            let h = layer.self_attn.apply(ctx, h, h, &self_mask)?;
            y = ctx.g.add(y, h)?;
            let h = layer.norm2.apply(ctx, y)?;
            let h = layer.cross_attn.apply(ctx, h, memory, &cross_mask)?;
            y = ctx.g.add(y, h)?;
            let h = layer.norm3.apply(ctx, y)?;
            let h = layer.ffn.apply(ctx, h, &route, &mut aux, cfg.gating, balance)?;
            y = ctx.g.add(y, h)?;
        }
        let y = self.dec_norm.apply(ctx, y)?;
        let logits = self.out.apply(ctx, y)?;
        Ok(Forward { logits, tgt_len: lt, aux })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top2_order_and_ties() {
        assert_eq!(top2(&[2.0, 1.0, 0.5, -1.0]), [0, 1]);
        assert_eq!(top2(&[0.0, 0.0, 0.0, 0.0]), [0, 1]);
        assert_eq!(top2(&[-1.0, 3.0, 3.0]), [1, 2]);
        assert_eq!(top2(&[5.0, 1.0, 7.0, 1.0]), [2, 0]);
        assert_eq!(top2(&[0.0, 1.0]), [1, 0]);
    }

    #[test]
    fn padding_layout() {
        let (ids, valid, len) = pad(&[vec![5, 6, 7], vec![8]]);
        assert_eq!(len, 3);
        assert_eq!(ids, vec![5, 6, 7, 8, 0, 0]);
        assert_eq!(valid, vec![true, true, true, true, false, false]);
    }
}
