//! Attention-based communicating actor.
//!
//! Per agent: `x = obs2hidden(o)`; key, value and query come from `x`; the
//! communication vector is the softmax(key_j · query_i)-weighted sum of the
//! values of the senders actually heard this step. With more than one round,
//! `x ← post(x ++ comm)` and communication repeats. Logits are
//! `actor(x ++ comm)`. An agent that hears nobody gets a zero comm vector.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{softmax_backward, softmax_masked, Activation, Grads, Mlp, MlpCache, Parameterized, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TarmacConfig {
    pub hidden: usize,
    pub key: usize,
    pub value: usize,
    pub rounds: usize,
}

impl Default for TarmacConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            key: 8,
            value: 8,
            rounds: 1,
        }
    }
}

impl TarmacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.key == 0 || self.value == 0 || self.rounds == 0 {
            return Err(Error::config("attention sizes and round count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TarmacActor {
    pub config: TarmacConfig,
    pub obs2hidden: Mlp,
    pub key: Mlp,
    pub value: Mlp,
    pub query: Mlp,
    /// Present only with more than one round.
    pub post: Option<Mlp>,
    pub actor: Mlp,
}

struct Round {
    k_cache: MlpCache,
    v_cache: MlpCache,
    q_cache: MlpCache,
    k: Tensor2,
    v: Tensor2,
    q: Tensor2,
    attention: Vec<Vec<f64>>,
    /// Cache of the `post` MLP that produced this round's `x` (rounds after the first).
    post_cache: Option<MlpCache>,
}

pub struct TarmacCache {
    senders: Vec<Vec<usize>>,
    obs_cache: MlpCache,
    rounds: Vec<Round>,
    actor_cache: MlpCache,
}

impl TarmacCache {
    /// Attention weights of the last round, aligned with each row's senders.
    pub fn attention(&self) -> &[Vec<f64>] {
        &self.rounds.last().expect("at least one round").attention
    }
}

fn communicate(k: &Tensor2, q: &Tensor2, v: &Tensor2, senders: &[Vec<usize>]) -> Result<(Vec<Vec<f64>>, Tensor2)> {
    let mut comm = Array2::zeros((q.nrows(), v.ncols()));
    let mut attention = Vec::with_capacity(senders.len());
    for (i, from) in senders.iter().enumerate() {
        if from.is_empty() {
            attention.push(Vec::new());
            continue;
        }
        let logits: Vec<f64> = from.iter().map(|&j| k.row(j).dot(&q.row(i))).collect();
        let att = softmax_masked(&logits, &vec![true; from.len()])?;
        let mut row = comm.row_mut(i);
        for (&j, &a) in from.iter().zip(&att) {
            row.scaled_add(a, &v.row(j));
        }
        attention.push(att);
    }
    Ok((attention, comm))
}

impl TarmacActor {
    pub fn new(obs_dim: usize, config: TarmacConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let TarmacConfig { hidden: h, key, value, rounds } = config;
        let relu = Activation::Relu;
        let tanh = Activation::Tanh;
        let id = Activation::Identity;
        Ok(Self {
            config,
            obs2hidden: Mlp::new(&[obs_dim, h, h], relu, relu, rng)?,
            key: Mlp::new(&[h, h, key], tanh, id, rng)?,
            value: Mlp::new(&[h, h, value], tanh, id, rng)?,
            query: Mlp::new(&[h, h, key], tanh, id, rng)?,
            post: if rounds > 1 {
                Some(Mlp::new(&[h + value, h, h], relu, relu, rng)?)
            } else {
                None
            },
            actor: Mlp::new(&[h + value, h, 2], relu, id, rng)?,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs2hidden.input_dim()
    }

    fn check(&self, obs: &Tensor2, senders: &[Vec<usize>]) -> Result<()> {
        if senders.len() != obs.nrows() {
            return Err(Error::shape(format!("{} sender lists for {} rows", senders.len(), obs.nrows())));
        }
        if senders.iter().flatten().any(|&j| j >= obs.nrows()) {
            return Err(Error::shape("sender index out of range"));
        }
        Ok(())
    }

    /// Logits for every row; `senders[i]` lists the rows whose messages row `i` hears.
    pub fn forward(&self, obs: &Tensor2, senders: &[Vec<usize>]) -> Result<(Tensor2, TarmacCache)> {
        self.check(obs, senders)?;
        let (mut x, obs_cache) = self.obs2hidden.forward(obs)?;
        let mut rounds = Vec::with_capacity(self.config.rounds);
        let mut post_cache = None;
        loop {
            let (k, k_cache) = self.key.forward(&x)?;
            let (v, v_cache) = self.value.forward(&x)?;
            let (q, q_cache) = self.query.forward(&x)?;
            let (attention, comm) = communicate(&k, &q, &v, senders)?;
            let joined = concatenate![Axis(1), x, comm];
            rounds.push(Round {
                k_cache,
                v_cache,
                q_cache,
                k,
                v,
                q,
                attention,
                post_cache: post_cache.take(),
            });
            if rounds.len() == self.config.rounds {
                let (logits, actor_cache) = self.actor.forward(&joined)?;
                return Ok((
                    logits,
                    TarmacCache {
                        senders: senders.to_vec(),
                        obs_cache,
                        rounds,
                        actor_cache,
                    },
                ));
            }
            let post = self.post.as_ref().ok_or_else(|| Error::config("multi-round actor lacks its post MLP"))?;
            let (next, cache) = post.forward(&joined)?;
            x = next;
            post_cache = Some(cache);
        }
    }

    pub fn predict(&self, obs: &Tensor2, senders: &[Vec<usize>]) -> Result<Tensor2> {
        Ok(self.forward(obs, senders)?.0)
    }

    /// Parameter gradients in declaration order.
    pub fn backward(&self, cache: &TarmacCache, dlogits: &Tensor2) -> Result<Grads> {
        let h = self.config.hidden;
        let (actor_grads, d_joined) = self.actor.backward(&cache.actor_cache, dlogits)?;
        let mut dx = d_joined.slice(s![.., ..h]).to_owned();
        let mut dcomm = d_joined.slice(s![.., h..]).to_owned();

        let mut key_grads = self.key.zero_grads();
        let mut value_grads = self.value.zero_grads();
        let mut query_grads = self.query.zero_grads();
        let mut post_grads = self.post.as_ref().map(|p| p.zero_grads());

        for round in cache.rounds.iter().rev() {
            let mut dk = Array2::zeros(round.k.dim());
            let mut dq = Array2::zeros(round.q.dim());
            let mut dv = Array2::zeros(round.v.dim());
            for (i, att) in round.attention.iter().enumerate() {
                if att.is_empty() {
                    continue;
                }
                let from = &cache.senders[i];
                let dc = dcomm.row(i);
                let datt: Vec<f64> = from.iter().map(|&j| round.v.row(j).dot(&dc)).collect();
                for (&j, &a) in from.iter().zip(att) {
                    dv.row_mut(j).scaled_add(a, &dc);
                }
                let dlogit = softmax_backward(att, &datt);
                for (&j, &g) in from.iter().zip(&dlogit) {
                    dk.row_mut(j).scaled_add(g, &round.q.row(i));
                    let kj = round.k.row(j).to_owned();
                    dq.row_mut(i).scaled_add(g, &kj);
                }
            }
            let (gk, dxk) = self.key.backward(&round.k_cache, &dk)?;
            let (gv, dxv) = self.value.backward(&round.v_cache, &dv)?;
            let (gq, dxq) = self.query.backward(&round.q_cache, &dq)?;
            crate::neural::accumulate(&mut key_grads, &gk);
            crate::neural::accumulate(&mut value_grads, &gv);
            crate::neural::accumulate(&mut query_grads, &gq);
            dx += &dxk;
            dx += &dxv;
            dx += &dxq;
            if let Some(pc) = &round.post_cache {
                let post = self.post.as_ref().expect("post cache implies post MLP");
                let (gp, d_prev) = post.backward(pc, &dx)?;
                crate::neural::accumulate(post_grads.as_mut().expect("post grads"), &gp);
                dx = d_prev.slice(s![.., ..h]).to_owned();
                dcomm = d_prev.slice(s![.., h..]).to_owned();
            }
        }
        let (obs_grads, _) = self.obs2hidden.backward(&cache.obs_cache, &dx)?;

        let mut grads = obs_grads;
        grads.extend(key_grads);
        grads.extend(value_grads);
        grads.extend(query_grads);
        if let Some(pg) = post_grads {
            grads.extend(pg);
        }
        grads.extend(actor_grads);
        Ok(grads)
    }
}

impl Parameterized for TarmacActor {
    fn params(&self) -> Vec<&Tensor2> {
        let mut p = self.obs2hidden.params();
        p.extend(self.key.params());
        p.extend(self.value.params());
        p.extend(self.query.params());
        if let Some(post) = &self.post {
            p.extend(post.params());
        }
        p.extend(self.actor.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut p = self.obs2hidden.params_mut();
        p.extend(self.key.params_mut());
        p.extend(self.value.params_mut());
        p.extend(self.query.params_mut());
        if let Some(post) = &mut self.post {
            p.extend(post.params_mut());
        }
        p.extend(self.actor.params_mut());
        p
    }
}
