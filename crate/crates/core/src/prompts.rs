//! Prompt mechanisms attached to a set partition: static prompt tokens, a
//! per-set prompt generator, and the scene-oriented prompt pool.
//!
//! Every mechanism produces [`PromptedSets`]: the partition's sets with prompt
//! rows prepended, laid out as one `[N·(p + n_s) × C]` matrix so attention can
//! treat the sets as a batch.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkernel::{cosine, LinearVars, SetLayout, Tape, Tensor, Var};
use crate::params::{fan_in_weight, param_rng, uniform, ParamGroup, ParamStore};
use crate::partition::SetPartition;

/// Half-width of the uniform init for tokens, keys and values.
pub const PROMPT_INIT: f64 = 0.02;

/// Trainable `n_T × C` block shared by every set of partition `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptToken {
    pub partition: usize,
    pub tokens: Tensor,
}

impl PromptToken {
    pub fn init(partition: usize, count: usize, channels: usize, seed: u64) -> Self {
        let name = Self::param_name(partition);
        PromptToken {
            partition,
            tokens: uniform(&[count, channels], PROMPT_INIT, &mut param_rng(seed, &name)),
        }
    }

    pub fn param_name(partition: usize) -> String {
        format!("prompt.{partition}.tokens")
    }

    pub fn register(self, store: &mut ParamStore) -> Result<()> {
        store.insert(Self::param_name(self.partition), self.tokens, ParamGroup::PromptToken)
    }
}

/// MLP mapping a pooled set summary to `n_G` prompt rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerator {
    pub partition: usize,
    pub prompts: usize,
    /// `(weight [out×in], bias [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PromptGenerator {
    pub fn init(partition: usize, layers: usize, prompts: usize, channels: usize, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("generator needs ≥ 1 layer"));
        }
        let layers = (0..layers)
            .map(|l| {
                let dout = if l + 1 == layers { prompts * channels } else { channels };
                let prefix = Self::layer_prefix(partition, l);
                let mut rng = param_rng(seed, &prefix);
                let w = fan_in_weight(dout, channels, &mut rng);
                let b = uniform(&[dout], 1.0 / (channels as f64).sqrt(), &mut rng);
                (w, b)
            })
            .collect();
        Ok(PromptGenerator {
            partition,
            prompts,
            layers,
        })
    }

    pub fn layer_prefix(partition: usize, layer: usize) -> String {
        format!("generator.{partition}.{layer}")
    }

    pub fn register(self, store: &mut ParamStore) -> Result<()> {
        for (l, (w, b)) in self.layers.into_iter().enumerate() {
            let prefix = Self::layer_prefix(self.partition, l);
            store.insert(format!("{prefix}.weight"), w, ParamGroup::Generator)?;
            store.insert(format!("{prefix}.bias"), b, ParamGroup::Generator)?;
        }
        Ok(())
    }
}

/// `M` keys `[M×C]` paired with `M` prompt blocks `[M×n_P×C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    pub partition: usize,
    pub keys: Tensor,
    pub values: Tensor,
    pub top_k: usize,
}

impl PromptPool {
    pub fn new(partition: usize, keys: Tensor, values: Tensor, top_k: usize) -> Result<Self> {
        let (m, c) = match keys.shape() {
            [m, c] => (*m, *c),
            s => return Err(Error::dim("prompt pool keys", s, &[0, 0])),
        };
        match values.shape() {
            [vm, np, vc] if *vm == m && *vc == c && *np >= 1 => {}
            s => return Err(Error::dim("prompt pool values", s, &[m, 1, c])),
        }
        if top_k == 0 || top_k > m {
            return Err(Error::config(format!("top-K {top_k} must lie in 1..={m}")));
        }
        Ok(PromptPool {
            partition,
            keys,
            values,
            top_k,
        })
    }

    pub fn init(partition: usize, size: usize, length: usize, top_k: usize, channels: usize, seed: u64) -> Result<Self> {
        let keys = uniform(&[size, channels], PROMPT_INIT, &mut param_rng(seed, &Self::keys_name(partition)));
        let values = uniform(
            &[size, length, channels],
            PROMPT_INIT,
            &mut param_rng(seed, &Self::values_name(partition)),
        );
        Self::new(partition, keys, values, top_k)
    }

    pub fn keys_name(partition: usize) -> String {
        format!("pool.{partition}.keys")
    }

    pub fn values_name(partition: usize) -> String {
        format!("pool.{partition}.values")
    }

    pub fn size(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn prompt_length(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn register(self, store: &mut ParamStore) -> Result<()> {
        store.insert(Self::keys_name(self.partition), self.keys, ParamGroup::Pool)?;
        store.insert(Self::values_name(self.partition), self.values, ParamGroup::Pool)
    }
}

/// Prompted sets `[N·(p + n_s) × C]` and their attention layout.
#[derive(Clone, Debug)]
pub struct PromptedSets {
    pub tokens: Var,
    pub layout: SetLayout,
    /// Prompt rows heading every set.
    pub prompt_rows: usize,
}

impl PromptedSets {
    pub fn tokens_per_set(&self) -> usize {
        self.layout.len
    }
}

/// Result of scoring one query against a pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Selected entries, best score first, lower index on ties.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Selected value blocks `[K×n_P×C]`.
    pub prompts: Tensor,
}

/// Per-set pool selections of one partition plus the key-pull term
/// `mean(1 − cos(query, selected key))`.
#[derive(Clone, Debug)]
pub struct PoolAttachment {
    pub sets: PromptedSets,
    pub indices: Vec<Vec<usize>>,
    pub key_pull: Option<Var>,
}

/// Prepend rows of `prefix` (chosen per set by `rows_for`) to every set of
/// `sp`, reading voxel rows from `features`.
fn prepend<F>(tape: &mut Tape, prefix: Var, features: Var, sp: &SetPartition, prompt_rows: usize, rows_for: F) -> Result<PromptedSets>
where
    F: Fn(usize) -> Vec<usize>,
{
    let offset = tape.value(prefix).rows();
    let source = tape.concat_rows(prefix, features)?;
    let len = prompt_rows + sp.set_size;
    let mut index: Vec<Option<usize>> = Vec::with_capacity(sp.num_sets() * len);
    let mut mask = Vec::with_capacity(sp.num_sets() * len);
    for i in 0..sp.num_sets() {
        let rows = rows_for(i);
        if rows.len() != prompt_rows {
            return Err(Error::wiring(format!(
                "set {i} received {} prompt rows, expected {prompt_rows}",
                rows.len()
            )));
        }
        index.extend(rows.into_iter().map(Some));
        mask.extend(std::iter::repeat_n(true, prompt_rows));
        for slot in sp.slots(i) {
            index.push(slot.map(|v| v + offset));
            mask.push(slot.is_some());
        }
    }
    let tokens = tape.gather_rows(source, index.into())?;
    Ok(PromptedSets {
        tokens,
        layout: SetLayout::new(sp.num_sets(), len, mask)?,
        prompt_rows,
    })
}

fn check_partition(sp: &SetPartition, owner: usize, what: &str) -> Result<()> {
    if sp.index != owner {
        return Err(Error::wiring(format!(
            "{what} of partition {owner} attached to partition {}",
            sp.index
        )));
    }
    Ok(())
}

fn check_channels(tape: &Tape, a: Var, features: Var, what: &'static str) -> Result<()> {
    if tape.value(a).cols() != tape.value(features).cols() {
        return Err(Error::dim(what, tape.value(a).shape(), tape.value(features).shape()));
    }
    Ok(())
}

/// Sets without prompts.
pub fn attach_none(tape: &mut Tape, features: Var, sp: &SetPartition) -> Result<PromptedSets> {
    let c = tape.value(features).cols();
    let empty = tape.constant(Tensor::zeros(&[0, c]));
    prepend(tape, empty, features, sp, 0, |_| Vec::new())
}

/// `[PT_j; S_i]` for every set; `tokens` is `[n_T×C]` and shared by all sets.
pub fn attach_prompt_tokens(tape: &mut Tape, features: Var, sp: &SetPartition, tokens: Var, partition: usize) -> Result<PromptedSets> {
    check_partition(sp, partition, "prompt tokens")?;
    check_channels(tape, tokens, features, "attach_prompt_tokens")?;
    let n = tape.value(tokens).rows();
    prepend(tape, tokens, features, sp, n, |_| (0..n).collect())
}

/// Masked channelwise max of every set, `[N×C]`.
pub fn set_summaries(tape: &mut Tape, features: Var, sp: &SetPartition) -> Result<Var> {
    tape.segment_max(features, &sp.members())
}

/// `f^G(S_i)` for every set: the max-pooled set summary through the MLP,
/// giving `[N·n_G × C]`.
pub fn generate_prompts(tape: &mut Tape, features: Var, sp: &SetPartition, layers: &[LinearVars], prompts: usize) -> Result<Var> {
    let c = tape.value(features).cols();
    let mut h = set_summaries(tape, features, sp)?;
    for (l, layer) in layers.iter().enumerate() {
        h = layer.apply(tape, h)?;
        if l + 1 < layers.len() {
            h = tape.gelu(h);
        }
    }
    if tape.value(h).cols() != prompts * c {
        return Err(Error::dim("generate_prompts", tape.value(h).shape(), &[sp.num_sets(), prompts * c]));
    }
    tape.reshape(h, &[sp.num_sets() * prompts, c])
}

/// `[f^G_j(S_i); S_i]` for every set.
pub fn attach_generated_prompts(
    tape: &mut Tape,
    features: Var,
    sp: &SetPartition,
    layers: &[LinearVars],
    prompts: usize,
    partition: usize,
) -> Result<PromptedSets> {
    check_partition(sp, partition, "prompt generator")?;
    let generated = generate_prompts(tape, features, sp, layers, prompts)?;
    prepend(tape, generated, features, sp, prompts, |i| (i * prompts..(i + 1) * prompts).collect())
}

/// Query of one set: masked channelwise max over its rows.
pub fn pool_query(tape: &mut Tape, set: Var, mask: &[bool]) -> Result<Var> {
    tape.max_pool_rows(set, mask)
}

/// Indices of the `k` best cosine scores, descending, lower index on ties.
pub fn top_k_by_cosine(keys: &Tensor, query: &[f64], k: usize, eps: f64) -> (Vec<usize>, Vec<f64>) {
    let scores: Vec<f64> = (0..keys.rows()).map(|m| cosine(query, keys.row(m), eps)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let top = order.iter().map(|&m| scores[m]).collect();
    (order, top)
}

/// Score `query` against every key and gather the top-K value blocks.
pub fn pool_select(pool: &PromptPool, query: &[f64], eps: f64) -> Result<Selection> {
    if query.len() != pool.keys.cols() {
        return Err(Error::dim("pool_select", &[query.len()], pool.keys.shape()));
    }
    let (indices, scores) = top_k_by_cosine(&pool.keys, query, pool.top_k, eps);
    let (np, c) = (pool.prompt_length(), pool.keys.cols());
    let mut data = Vec::with_capacity(indices.len() * np * c);
    for &m in &indices {
        data.extend_from_slice(&pool.values.data()[m * np * c..(m + 1) * np * c]);
    }
    Ok(Selection {
        prompts: Tensor::new(&[indices.len(), np, c], data)?,
        indices,
        scores,
    })
}

/// Tape handles of one partition's pool.
#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    pub partition: usize,
    pub keys: Var,
    /// Values as stored, `[M×n_P×C]`.
    pub values: Var,
    pub top_k: usize,
}

/// `[f^s(PP_j, f^q(S_i)); S_i]` for every set. Selection is hard top-K; the
/// selected value rows receive gradients through the prepended tokens and
/// the keys through the returned pull term.
pub fn attach_pool_prompts(tape: &mut Tape, features: Var, sp: &SetPartition, pool: &PoolVars, eps: f64) -> Result<PoolAttachment> {
    check_partition(sp, pool.partition, "prompt pool")?;
    let (m, np, c) = match tape.value(pool.values).shape() {
        [m, np, c] => (*m, *np, *c),
        s => return Err(Error::dim("attach_pool_prompts", s, &[0, 0, 0])),
    };
    check_channels(tape, pool.keys, features, "attach_pool_prompts")?;
    if pool.top_k == 0 || pool.top_k > m {
        return Err(Error::config(format!("top-K {} must lie in 1..={m}", pool.top_k)));
    }
    let k = pool.top_k;
    let queries = set_summaries(tape, features, sp)?;
    let indices: Vec<Vec<usize>> = {
        let keys = tape.value(pool.keys);
        let q = tape.value(queries);
        (0..sp.num_sets())
            .map(|i| top_k_by_cosine(keys, q.row(i), k, eps).0)
            .collect()
    };
    let flat_values = tape.reshape(pool.values, &[m * np, c])?;
    let sets = prepend(tape, flat_values, features, sp, k * np, |i| {
        indices[i].iter().flat_map(|&e| e * np..(e + 1) * np).collect()
    })?;
    let key_pull = if sp.num_sets() == 0 {
        None
    } else {
        let key_rows: Arc<[Option<usize>]> = indices.iter().flatten().map(|&e| Some(e)).collect();
        let query_rows: Arc<[Option<usize>]> = (0..sp.num_sets())
            .flat_map(|i| std::iter::repeat_n(Some(i), k))
            .collect();
        let n = key_rows.len() as f64;
        let chosen = tape.gather_rows(pool.keys, key_rows)?;
        let repeated = tape.gather_rows(queries, query_rows)?;
        let cos = tape.cosine_rows(repeated, chosen, eps)?;
        let total = tape.sum(cos);
        Some(tape.affine(total, -1.0 / n, 1.0))
    };
    Ok(PoolAttachment {
        sets,
        indices,
        key_pull,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::partition::{set_partition, Axis};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// `v` voxels in one 12×12 window, or two windows when `v > 144`.
    fn partition(v: usize, n_s: usize, j: usize) -> SetPartition {
        let coords: Vec<[usize; 2]> = (0..v).map(|i| [i % 12 + 12 * (i / 144), (i / 12) % 12]).collect();
        set_partition(&coords, [24, 24], [12, 12], Axis::X, n_s, j).unwrap()
    }

    #[test]
    fn prompt_token_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sp = partition(36, 36, 1);
        let mut tape = Tape::new();
        let f = tape.constant(random(&[36, 192], &mut rng));
        let pt = PromptToken::init(1, 1, 192, 0);
        let t = tape.param(pt.tokens.clone());
        let ps = attach_prompt_tokens(&mut tape, f, &sp, t, 1).unwrap();
        assert_eq!(ps.tokens_per_set(), 37);
        assert_eq!(tape.value(ps.tokens).shape(), &[37, 192]);

        let empty = tape.param(Tensor::zeros(&[0, 192]));
        let ps = attach_prompt_tokens(&mut tape, f, &sp, empty, 1).unwrap();
        assert_eq!(ps.tokens_per_set(), 36);
        assert_eq!(tape.value(ps.tokens).data(), sp.gather(tape.value(f)).data());

        let wrong = tape.param(pt.tokens);
        assert!(matches!(
            attach_prompt_tokens(&mut tape, f, &sp, wrong, 2),
            Err(Error::Wiring(_))
        ));
    }

    #[test]
    fn prompt_token_is_shared_by_all_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp = partition(60, 36, 3);
        assert_eq!(sp.num_sets(), 2);
        let features = random(&[60, 4], &mut rng);
        let run = |tok: Tensor| {
            let mut tape = Tape::new();
            let f = tape.constant(features.clone());
            let t = tape.param(tok);
            let ps = attach_prompt_tokens(&mut tape, f, &sp, t, 3).unwrap();
            let out = tape.value(ps.tokens).clone();
            let w = tape.constant(Tensor::ones(out.shape()));
            let prod = tape.mul(ps.tokens, w).unwrap();
            let loss = tape.sum(prod);
            let g = tape.backward(loss).unwrap();
            (out, g.get(t).unwrap().clone())
        };
        let (a, grad) = run(Tensor::zeros(&[1, 4]));
        let (b, _) = run(Tensor::ones(&[1, 4]));
        // prompt rows of both sets move together, voxel rows stay put
        for set in 0..2 {
            let r = set * 37;
            assert!(a.row(r).iter().zip(b.row(r)).all(|(x, y)| y - x == 1.0));
            for s in 1..37 {
                assert_eq!(a.row(r + s), b.row(r + s));
            }
        }
        // gradient accumulates over both sets
        assert_eq!(grad.data(), &[2.0; 4]);
    }

    fn generator_vars(tape: &mut Tape, g: &PromptGenerator) -> Vec<LinearVars> {
        g.layers
            .iter()
            .map(|(w, b)| {
                let w = tape.param(w.clone());
                let b = tape.param(b.clone());
                LinearVars::new(w, Some(b))
            })
            .collect()
    }

    #[test]
    fn generated_prompts_shapes_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sp = partition(36, 36, 2);
        let g = PromptGenerator::init(2, 4, 1, 192, 7).unwrap();
        let mut tape = Tape::new();
        let layers = generator_vars(&mut tape, &g);
        let f = tape.constant(random(&[36, 192], &mut rng));
        let ps = attach_generated_prompts(&mut tape, f, &sp, &layers, 1, 2).unwrap();
        assert_eq!(ps.tokens_per_set(), 37);

        // two sets with identical content get identical prompts
        let sp2 = partition(6, 3, 2);
        let row = random(&[1, 8], &mut rng);
        let f = tape.constant(Tensor::from_rows(&vec![row.data().to_vec(); 6]).unwrap());
        let g = PromptGenerator::init(2, 4, 2, 8, 7).unwrap();
        let layers = generator_vars(&mut tape, &g);
        let p = generate_prompts(&mut tape, f, &sp2, &layers, 2).unwrap();
        let out = tape.value(p);
        assert_eq!(out.shape(), &[4, 8]);
        assert_eq!(out.slice_rows(0, 2), out.slice_rows(2, 4));
    }

    #[test]
    fn zero_generator_emits_zero_prompts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sp = partition(10, 36, 1);
        let mut tape = Tape::new();
        let layers: Vec<LinearVars> = (0..4)
            .map(|_| {
                let w = tape.param(Tensor::zeros(&[8, 8]));
                let b = tape.param(Tensor::zeros(&[8]));
                LinearVars::new(w, Some(b))
            })
            .collect();
        let f = tape.constant(random(&[10, 8], &mut rng));
        let p = generate_prompts(&mut tape, f, &sp, &layers, 1).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_query_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.0]]).unwrap());
        let q = pool_query(&mut tape, x, &[true]).unwrap();
        assert_eq!(tape.value(q).data(), &[0.5, -1.0, 2.0, 0.0]);

        let rows = [[1.0, -2.0, 0.5, 3.0], [0.0, 4.0, -1.0, 2.0], [2.5, 1.0, 0.25, -3.0]];
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let q = pool_query(&mut tape, x, &[true; 3]).unwrap();
        assert_eq!(tape.value(q).data(), &[2.5, 4.0, 0.5, 3.0]);
        let rev: Vec<[f64; 4]> = rows.iter().rev().copied().collect();
        let x = tape.constant(Tensor::from_rows(&rev).unwrap());
        let q2 = pool_query(&mut tape, x, &[true; 3]).unwrap();
        assert_eq!(tape.value(q).data(), tape.value(q2).data());
    }

    #[test]
    fn select_all_when_k_equals_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = PromptPool::new(1, random(&[6, 5], &mut rng), random(&[6, 2, 5], &mut rng), 6).unwrap();
        let q = random(&[5], &mut rng);
        let sel = pool_select(&pool, q.data(), 1e-8).unwrap();
        let mut sorted = sel.indices.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert!(sel.scores.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(sel.prompts.shape(), &[6, 2, 5]);
    }

    #[test]
    fn exact_match_ranks_first() {
        let c = 10;
        let mut keys = Tensor::zeros(&[10, c]);
        for m in 0..10 {
            keys.row_mut(m)[m] = 1.0 + m as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = PromptPool::new(1, keys.clone(), random(&[10, 1, c], &mut rng), 3).unwrap();
        let sel = pool_select(&pool, keys.row(7), 1e-8).unwrap();
        assert_eq!(sel.indices[0], 7);
        assert_eq!(sel.scores[0], 1.0);
        // the rest tie at zero and fall back to index order
        assert_eq!(&sel.indices[1..], &[0, 1]);
        assert_eq!(&sel.prompts.data()[..c], &pool.values.data()[7 * c..8 * c]);
    }

    /// Score every key, sort the full list, take the first K.
    fn full_sort_oracle(keys: &Tensor, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..keys.rows())
            .map(|m| {
                let row = keys.row(m);
                let dot: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
                let nk = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
                let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
                (dot / (nk * nq), m)
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, m)| m).collect()
    }

    #[test]
    fn full_size_pool_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = PromptPool::init(1, 40, 5, 8, 192, 9).unwrap();
        for _ in 0..20 {
            let q = random(&[192], &mut rng);
            let sel = pool_select(&pool, q.data(), 1e-8).unwrap();
            assert_eq!(sel.indices, full_sort_oracle(&pool.keys, q.data(), 8));
        }
    }

    fn pool_vars(tape: &mut Tape, pool: &PromptPool) -> PoolVars {
        PoolVars {
            partition: pool.partition,
            keys: tape.param(pool.keys.clone()),
            values: tape.param(pool.values.clone()),
            top_k: pool.top_k,
        }
    }

    #[test]
    fn pool_prompt_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sp = partition(36, 36, 5);
        let mut tape = Tape::new();
        let f = tape.constant(random(&[36, 192], &mut rng));
        let pool = PromptPool::init(5, 40, 5, 8, 192, 1).unwrap();
        let vars = pool_vars(&mut tape, &pool);
        let att = attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8).unwrap();
        assert_eq!(att.sets.tokens_per_set(), 76);
        assert_eq!(tape.value(att.sets.tokens).shape(), &[76, 192]);

        let tiny = PromptPool::init(5, 40, 1, 1, 192, 1).unwrap();
        let vars = pool_vars(&mut tape, &tiny);
        let att = attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8).unwrap();
        assert_eq!(att.sets.tokens_per_set(), 37);

        let vars = PoolVars { partition: 4, ..vars };
        assert!(matches!(
            attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8),
            Err(Error::Wiring(_))
        ));
    }

    #[test]
    fn identical_sets_select_identical_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sp = partition(8, 4, 1);
        let row = random(&[1, 6], &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(&vec![row.data().to_vec(); 8]).unwrap());
        let pool = PromptPool::init(1, 10, 2, 3, 6, 4).unwrap();
        let vars = pool_vars(&mut tape, &pool);
        let att = attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8).unwrap();
        assert_eq!(att.indices[0], att.indices[1]);
    }

    #[test]
    fn gradients_reach_only_selected_values_and_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sp = partition(5, 8, 1);
        let pool = PromptPool::init(1, 6, 2, 2, 4, 3).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(random(&[5, 4], &mut rng));
        let vars = pool_vars(&mut tape, &pool);
        let att = attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8).unwrap();
        let s = tape.sum(att.sets.tokens);
        let pull = att.key_pull.unwrap();
        let loss = tape.add(s, pull).unwrap();
        let g = tape.backward(loss).unwrap();
        let gv = g.get(vars.values).unwrap();
        let gk = g.get(vars.keys).unwrap();
        let chosen = &att.indices[0];
        for m in 0..6 {
            let block = &gv.data()[m * 8..(m + 1) * 8];
            let krow = gk.row(m);
            if chosen.contains(&m) {
                assert!(block.iter().all(|&v| v == 1.0));
                assert!(krow.iter().any(|&v| v != 0.0));
            } else {
                assert!(block.iter().all(|&v| v == 0.0));
                assert!(krow.iter().all(|&v| v == 0.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prompted_token_counts_follow_shape_laws(
            n_s in 1usize..=36, n_t in 0usize..=4, n_g in 0usize..=4, m in 1usize..=40, n_p in 1usize..=5, k_frac in 0.0f64..1.0, seed in any::<u64>()
        ) {
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 4;
            let v = 1 + rng.random_range(0..50);
            let sp = partition(v, n_s, 1);
            let mut tape = Tape::new();
            let f = tape.constant(random(&[v, c], &mut rng));
            let tok = tape.param(random(&[n_t, c], &mut rng));
            prop_assert_eq!(attach_prompt_tokens(&mut tape, f, &sp, tok, 1).unwrap().tokens_per_set(), n_t + n_s);
            let g = PromptGenerator::init(1, 2, n_g, c, seed).unwrap();
            let layers = generator_vars(&mut tape, &g);
            prop_assert_eq!(attach_generated_prompts(&mut tape, f, &sp, &layers, n_g, 1).unwrap().tokens_per_set(), n_g + n_s);
            let pool = PromptPool::init(1, m, n_p, k, c, seed).unwrap();
            let vars = pool_vars(&mut tape, &pool);
            prop_assert_eq!(attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8).unwrap().sets.tokens_per_set(), k * n_p + n_s);
        }

        #[test]
        fn selection_matches_oracle_and_ignores_query_scale(m in 1usize..=40, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = PromptPool::new(1, random(&[m, 8], &mut rng), random(&[m, 1, 8], &mut rng), k).unwrap();
            let q = random(&[8], &mut rng);
            let sel = pool_select(&pool, q.data(), 1e-8).unwrap();
            prop_assert_eq!(&sel.indices, &full_sort_oracle(&pool.keys, q.data(), k));
            for scale in [1e-3, 1.0, 1e3] {
                let scaled: Vec<f64> = q.data().iter().map(|v| v * scale).collect();
                prop_assert_eq!(&pool_select(&pool, &scaled, 1e-8).unwrap().indices, &sel.indices);
            }
        }

        #[test]
        fn unselected_values_do_not_touch_the_output(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sp = partition(20, 8, 1);
            let features = random(&[20, 4], &mut rng);
            let pool = PromptPool::init(1, 8, 2, 2, 4, seed).unwrap();
            let run = |pool: &PromptPool| {
                let mut tape = Tape::new();
                let f = tape.constant(features.clone());
                let vars = pool_vars(&mut tape, pool);
                let att = attach_pool_prompts(&mut tape, f, &sp, &vars, 1e-8).unwrap();
                (tape.value(att.sets.tokens).clone(), att.indices)
            };
            let (base, indices) = run(&pool);
            let used: std::collections::HashSet<usize> = indices.into_iter().flatten().collect();
            if let Some(unused) = (0..8).find(|m| !used.contains(m)) {
                let mut changed = pool.clone();
                for v in &mut changed.values.data_mut()[unused * 8..(unused + 1) * 8] {
                    *v += 5.0;
                }
                prop_assert_eq!(run(&changed).0, base);
            }
        }
    }
}
