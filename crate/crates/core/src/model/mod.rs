//! Task-level mixture-of-experts encoder-decoder and dense extraction.

mod config;
mod network;
mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{GateMode, MoeConfig};
pub use params::{ParamId, ParamStore, ParamVars};

pub(crate) use network::{Ctx, FfnBlock, Network};

use crate::error::{Error, Result};
use crate::tasks::{InferenceStrategy, TaskId, TaskRegistry};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{TokenId, Vocab, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Encoder, Side::Decoder];

    pub(crate) fn prefix(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" | "enc" => Ok(Side::Encoder),
            "decoder" | "dec" => Ok(Side::Decoder),
            other => Err(Error::config(format!("unknown side {other:?}, expected encoder or decoder"))),
        }
    }
}

/// The two experts and gates a task uses in one MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub task: TaskId,
    pub layer: usize,
    pub side: Side,
    pub experts: [usize; 2],
    pub gates: [f64; 2],
}

/// Anything that maps padded token batches to next-token logits.
pub trait Translator: Sync {
    fn config(&self) -> &MoeConfig;

    fn vocab(&self) -> &Vocab;

    /// Task to route `(src, tgt)` under `strategy`; `None` for models that
    /// take no task input.
    fn resolve_task(&self, strategy: Option<InferenceStrategy>, src: &str, tgt: &str) -> Result<Option<TaskId>>;

    /// Logits shaped `[batch, tgt_len, vocab]`.
    fn logits(&self, src: &[Vec<TokenId>], tgt_in: &[Vec<TokenId>], tasks: Option<&[TaskId]>) -> Result<Tensor>;
}

fn eval_logits(
    cfg: &MoeConfig,
    store: &ParamStore,
    net: &Network,
    src: &[Vec<TokenId>],
    tgt_in: &[Vec<TokenId>],
    tasks: Option<&[TaskId]>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, false);
    let fwd = net.forward(&mut ctx, cfg, src, tgt_in, tasks, false)?;
    let t = g.value(fwd.logits).clone();
    t.reshape(vec![src.len(), fwd.tgt_len, cfg.vocab_size])
}

/// Encoder-decoder transformer with per-layer expert banks routed by task.
#[derive(Clone, Debug)]
pub struct MoeModel {
    cfg: MoeConfig,
    registry: TaskRegistry,
    vocab: Vocab,
    store: ParamStore,
    net: Network,
}

/// Result of a differentiable forward pass over a training batch.
pub struct LossGraph {
    pub graph: Graph,
    pub vars: ParamVars,
    pub loss: Var,
    /// Cross-entropy part of `loss`.
    pub nll: f64,
}

impl MoeModel {
    /// Fresh model; weights drawn from `N(0, 1/fan_in)` in a fixed order.
    pub fn init(cfg: MoeConfig, registry: TaskRegistry, vocab: Vocab, seed: u64) -> Result<Self> {
        Self::check_parts(&cfg, &registry, &vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::init(&cfg, &mut store, &mut rng)?;
        Ok(MoeModel {
            cfg,
            registry,
            vocab,
            store,
            net,
        })
    }

    /// Reassembles a model from loaded parameters.
    pub fn from_parts(cfg: MoeConfig, registry: TaskRegistry, vocab: Vocab, store: ParamStore) -> Result<Self> {
        Self::check_parts(&cfg, &registry, &vocab)?;
        let net = Network::bind(&cfg, &store, None)?;
        if store.numel() != cfg.param_count() {
            return Err(Error::config(format!(
                "parameter count {} does not match configuration ({})",
                store.numel(),
                cfg.param_count()
            )));
        }
        Ok(MoeModel {
            cfg,
            registry,
            vocab,
            store,
            net,
        })
    }

    fn check_parts(cfg: &MoeConfig, registry: &TaskRegistry, vocab: &Vocab) -> Result<()> {
        cfg.validate()?;
        if cfg.n_tasks != registry.len() {
            return Err(Error::config(format!(
                "config has {} tasks but the registry has {}",
                cfg.n_tasks,
                registry.len()
            )));
        }
        if cfg.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "config vocab_size {} does not match vocabulary of {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> u64 {
        self.store.numel()
    }

    /// Layer indices that carry a router on either side.
    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.cfg.n_layers).filter(|&l| self.cfg.is_moe_layer(l)).collect()
    }

    /// Routing of `task` in one MoE layer; a pure function of the weights.
    pub fn route(&self, layer: usize, side: Side, task: TaskId) -> Result<RoutingDecision> {
        if task.0 >= self.registry.len() {
            return Err(Error::Index {
                what: "tasks",
                index: task.0,
                size: self.registry.len(),
            });
        }
        let block = self.net.block(side, layer).ok_or(Error::Index {
            what: "layers",
            index: layer,
            size: self.cfg.n_layers,
        })?;
        let FfnBlock::Moe { router, .. } = block else {
            return Err(Error::config(format!("{side} layer {layer} has no router")));
        };
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &self.store, false);
        let (gates, experts) = router.gates(&mut ctx, task, self.cfg.gating)?;
        let g = graph.value(gates).data();
        Ok(RoutingDecision {
            task,
            layer,
            side,
            experts,
            gates: [g[0], g[1]],
        })
    }

    /// Builds the training graph: mean cross-entropy of `tgt_out` given
    /// teacher-forced `tgt_in`, plus the optional balancing term.
    pub fn loss_graph(
        &self,
        src: &[Vec<TokenId>],
        tgt_in: &[Vec<TokenId>],
        tgt_out: &[Vec<TokenId>],
        tasks: &[TaskId],
    ) -> Result<LossGraph> {
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &self.store, true);
        let (loss, nll) = self.loss_in(&mut ctx, src, tgt_in, tgt_out, tasks)?;
        let vars = ctx.into_vars();
        let nll = graph.value(nll).data()[0];
        Ok(LossGraph { graph, vars, loss, nll })
    }

    /// Appends the training loss to `g`, with the named parameters bound to
    /// caller-supplied vars instead of their stored values.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph,
        overrides: &[(&str, Var)],
        src: &[Vec<TokenId>],
        tgt_in: &[Vec<TokenId>],
        tgt_out: &[Vec<TokenId>],
        tasks: &[TaskId],
    ) -> Result<Var> {
        let mut ctx = Ctx::new(g, &self.store, false);
        for &(name, v) in overrides {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            ctx.preset(id, v);
        }
        Ok(self.loss_in(&mut ctx, src, tgt_in, tgt_out, tasks)?.0)
    }

    fn loss_in(
        &self,
        ctx: &mut Ctx,
        src: &[Vec<TokenId>],
        tgt_in: &[Vec<TokenId>],
        tgt_out: &[Vec<TokenId>],
        tasks: &[TaskId],
    ) -> Result<(Var, Var)> {
        let balance = self.cfg.balance_coef > 0.0;
        let fwd = self.net.forward(ctx, &self.cfg, src, tgt_in, Some(tasks), balance)?;
        if tgt_out.len() != tgt_in.len() {
            return Err(Error::Shape {
                op: "targets",
                left: vec![tgt_in.len()],
                right: vec![tgt_out.len()],
            });
        }
        let mut targets = Vec::with_capacity(src.len() * fwd.tgt_len);
        for (i, o) in tgt_out.iter().enumerate() {
            if o.len() != tgt_in[i].len() {
                return Err(Error::Shape {
                    op: "targets",
                    left: vec![tgt_in[i].len()],
                    right: vec![o.len()],
                });
            }
            targets.extend((0..fwd.tgt_len).map(|p| o.get(p).map_or(PAD as usize, |&t| t as usize)));
        }
        let nll = ctx.g.cross_entropy(fwd.logits, &targets, PAD as usize)?;
        let mut loss = nll;
        if !fwd.aux.is_empty() {
            let mut total = fwd.aux[0];
            for &a in &fwd.aux[1..] {
                total = ctx.g.add(total, a)?;
            }
            let scaled = ctx.g.scale(total, self.cfg.balance_coef)?;
            loss = ctx.g.add(loss, scaled)?;
        }
        Ok((loss, nll))
    }

    /// Materialises `task`'s routed experts and frozen gates as a router-free
    /// model that computes the same function.
    pub fn extract_dense(&self, task: TaskId) -> Result<DenseModel> {
        let key = self
            .registry
            .key(task)
            .ok_or(Error::Index {
                what: "tasks",
                index: task.0,
                size: self.registry.len(),
            })?
            .to_string();
        let mut routes = Vec::new();
        let mut fixed = BTreeMap::new();
        for side in Side::BOTH {
            for layer in self.moe_layers() {
                let r = self.route(layer, side, task)?;
                let mut chosen: Vec<(usize, f64)> = r.experts.iter().copied().zip(r.gates).collect();
                chosen.sort_by_key(|&(e, _)| e);
                fixed.insert((side, layer), chosen);
                routes.push(r);
            }
        }
        let mut keep = ParamStore::new();
        for (name, t) in self.store.iter() {
            if name.contains(".router.") {
                continue;
            }
            if let Some(e) = expert_of(name) {
                let (side, layer) = block_of(name).expect("expert names carry their block");
                if !fixed[&(side, layer)].iter().any(|&(x, _)| x == e) {
                    continue;
                }
            }
            keep.insert(name, t.clone())?;
        }
        DenseModel::from_parts(self.cfg.clone(), self.vocab.clone(), keep, key, routes)
    }
}

/// `enc.1.ffn.expert.5.up.w` -> 5
fn expert_of(name: &str) -> Option<usize> {
    let rest = name.split(".expert.").nth(1)?;
    rest.split('.').next()?.parse().ok()
}

/// `dec.0.ffn...` -> (Decoder, 0)
fn block_of(name: &str) -> Option<(Side, usize)> {
    let mut parts = name.split('.');
    let side = parts.next()?.parse().ok()?;
    let layer = parts.next()?.parse().ok()?;
    Some((side, layer))
}

impl Translator for MoeModel {
    fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn resolve_task(&self, strategy: Option<InferenceStrategy>, src: &str, tgt: &str) -> Result<Option<TaskId>> {
        let id = match strategy {
            Some(s) => self.registry.resolve_infer(s, src, tgt)?,
            None => self.registry.resolve_train(src, tgt)?,
        };
        Ok(Some(id))
    }

    fn logits(&self, src: &[Vec<TokenId>], tgt_in: &[Vec<TokenId>], tasks: Option<&[TaskId]>) -> Result<Tensor> {
        eval_logits(&self.cfg, &self.store, &self.net, src, tgt_in, tasks)
    }
}

/// A task-specialised network with frozen two-expert mixtures in place of
/// routed expert banks. Takes no task input.
#[derive(Clone, Debug)]
pub struct DenseModel {
    cfg: MoeConfig,
    vocab: Vocab,
    store: ParamStore,
    net: Network,
    task_key: String,
    routes: Vec<RoutingDecision>,
}

impl DenseModel {
    pub fn from_parts(
        cfg: MoeConfig,
        vocab: Vocab,
        store: ParamStore,
        task_key: String,
        routes: Vec<RoutingDecision>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut fixed = BTreeMap::new();
        for r in &routes {
            let mut chosen: Vec<(usize, f64)> = r.experts.iter().copied().zip(r.gates).collect();
            chosen.sort_by_key(|&(e, _)| e);
            fixed.insert((r.side, r.layer), chosen);
        }
        let net = Network::bind(&cfg, &store, Some(&fixed))?;
        Ok(DenseModel {
            cfg,
            vocab,
            store,
            net,
            task_key,
            routes,
        })
    }

    /// Key of the task this model was extracted for.
    pub fn task_key(&self) -> &str {
        &self.task_key
    }

    /// Frozen routing, one entry per MoE layer and side.
    pub fn routes(&self) -> &[RoutingDecision] {
        &self.routes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> u64 {
        self.store.numel()
    }
}

impl Translator for DenseModel {
    fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn resolve_task(&self, _strategy: Option<InferenceStrategy>, _src: &str, _tgt: &str) -> Result<Option<TaskId>> {
        Ok(None)
    }

    fn logits(&self, src: &[Vec<TokenId>], tgt_in: &[Vec<TokenId>], _tasks: Option<&[TaskId]>) -> Result<Tensor> {
        eval_logits(&self.cfg, &self.store, &self.net, src, tgt_in, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ParallelExample;
    use crate::tasks::TaskMode;

    pub(crate) fn tiny() -> MoeModel {
        let corpus = vec![
            ParallelExample::new("en", "xx", "a b c", "d e f"),
            ParallelExample::new("xx", "en", "d e", "a b"),
            ParallelExample::new("en", "yy", "a", "g"),
        ];
        let vocab = Vocab::build(&corpus, 64).unwrap();
        let reg = TaskRegistry::build(TaskMode::Lp, &[("en", "xx"), ("xx", "en"), ("en", "yy")]).unwrap();
        let mut cfg = MoeConfig::toy(vocab.len(), reg.len());
        cfg.d_model = 8;
        cfg.d_ff = 12;
        cfg.n_layers = 1;
        cfg.n_experts = 4;
        cfg.d_task = 3;
        MoeModel::init(cfg, reg, vocab, 7).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_matches_closed_form() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.param_count(), a.config().param_count());
    }

    #[test]
    fn route_contract() {
        let m = tiny();
        for t in m.registry().ids() {
            let r = m.route(0, Side::Decoder, t).unwrap();
            assert_ne!(r.experts[0], r.experts[1]);
            assert!((r.gates[0] + r.gates[1] - 1.0).abs() < 1e-12);
            assert!(r.gates[0] >= r.gates[1]);
            assert_eq!(r, m.route(0, Side::Decoder, t).unwrap());
        }
        assert!(m.route(0, Side::Encoder, TaskId(3)).is_err());
        assert!(m.route(1, Side::Encoder, TaskId(0)).is_err());
    }

    #[test]
    fn logits_shape_and_errors() {
        let m = tiny();
        let v = m.vocab();
        let src = vec![v.encode_source("en", "xx", "a b").unwrap()];
        let out = m.logits(&src, &[vec![crate::vocab::BOS]], Some(&[TaskId(0)])).unwrap();
        assert_eq!(out.shape(), &[1, 1, v.len()]);
        assert!(m.logits(&src, &[vec![crate::vocab::BOS]], Some(&[TaskId(9)])).is_err());
        assert!(m.logits(&src, &[vec![crate::vocab::BOS]], None).is_err());
        let long = vec![vec![4; m.config().max_len + 1]];
        assert!(m.logits(&long, &[vec![crate::vocab::BOS]], Some(&[TaskId(0)])).is_err());
    }

    #[test]
    fn extraction_drops_router_and_unused_experts() {
        let m = tiny();
        let d = m.extract_dense(TaskId(1)).unwrap();
        assert!(d.param_count() < m.param_count());
        assert!(d.params().iter().all(|(n, _)| !n.contains("router")));
        assert_eq!(d.routes().len(), 2);
        let again = m.extract_dense(TaskId(1)).unwrap();
        assert_eq!(d.params(), again.params());
        assert_eq!(d.routes(), again.routes());
        assert!(m.extract_dense(TaskId(3)).is_err());
    }

    #[test]
    fn name_parsing() {
        assert_eq!(expert_of("enc.1.ffn.expert.5.up.w"), Some(5));
        assert_eq!(expert_of("enc.1.ffn.up.w"), None);
        assert_eq!(block_of("dec.0.ffn.expert.2.up.b"), Some((Side::Decoder, 0)));
    }
}
