//! Episodes, the channel-mean shift, view aggregation, losses and the
//! accuracy report.

use rand::seq::index::sample;
use rand::Rng;
use relcorr_tensor::{Real, Tape, Tensor, TensorError, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub classes: Vec<ClassImages>,
}

impl Split {
    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Item {
    /// Class index within the split.
    pub class: usize,
    pub image: usize,
    /// Label within the episode, `0..N`.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Class-major: support `n * K + k` has label `n`.
    pub support: Vec<Item>,
    /// Class-major: query `n * Q + j` has label `n`.
    pub queries: Vec<Item>,
}

impl Episode {
    /// Items in batch order, supports first.
    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.support.iter().chain(&self.queries)
    }

    pub fn layout(&self) -> Layout {
        Layout { way: self.way, shot: self.shot, queries: self.queries.len() }
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.label).collect()
    }
}

/// Arrangement of an episode batch: `way * shot` supports, then the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl Layout {
    pub fn supports(&self) -> usize {
        self.way * self.shot
    }

    pub fn images(&self) -> usize {
        self.supports() + self.queries
    }

    /// `(query, support)` batch indices, query-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let ns = self.supports();
        (0..self.queries).flat_map(|i| (0..ns).map(move |j| (ns + i, j))).collect()
    }
}

pub fn sample_episode(split: &Split, way: usize, shot: usize, query: usize, rng: &mut impl Rng) -> Result<Episode> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(CoreError::Sampling(format!("way {way}, shot {shot}, query {query} must all be positive")));
    }
    if split.classes.len() < way {
        return Err(CoreError::Sampling(format!("split has {} classes, {way} requested", split.classes.len())));
    }
    if let Some(c) = split.classes.iter().find(|c| c.images.len() < shot + query) {
        return Err(CoreError::Sampling(format!(
            "class `{}` has {} images, {} required",
            c.name,
            c.images.len(),
            shot + query
        )));
    }
    let classes = sample(rng, split.classes.len(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut queries = Vec::with_capacity(way * query);
    for (label, &class) in classes.iter().enumerate() {
        let picks = sample(rng, split.classes[class].images.len(), shot + query).into_vec();
        support.extend(picks[..shot].iter().map(|&image| Item { class, image, label }));
        queries.extend(picks[shot..].iter().map(|&image| Item { class, image, label }));
    }
    Ok(Episode { way, shot, query, support, queries })
}

/// Subtracts, per channel, the mean over every position of every map in `z [B, H, W, C]`.
pub fn shift_channel_mean<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let c = *s.last().unwrap();
    let rows = tape.reshape(z, &[s.iter().product::<usize>() / c, c])?;
    let mean = tape.mean_axis(rows, 0)?;
    let neg = tape.scale(mean, -1.0)?;
    let shifted = tape.add_bias(rows, neg)?;
    Ok(tape.reshape(shifted, &s)?)
}

/// Per query, averages its `N K` pair views into `N` class views.
///
/// `views [Q * N * K, C]` in query-major, class-major order gives `[Q, N, C]`.
pub fn aggregate_views<T: Real>(tape: &mut Tape<T>, views: Var, layout: Layout) -> Result<Var> {
    let s = tape.shape(views).to_vec();
    let ns = layout.supports();
    if s.len() != 2 || ns == 0 || s[0] != layout.queries * ns {
        return Err(CoreError::Aggregation(format!(
            "{:?} views for {} queries against {} classes x {} shots",
            s, layout.queries, layout.way, layout.shot
        )));
    }
    let (q, n, k, c) = (layout.queries, layout.way, layout.shot, s[1]);
    let inv = T::lit(1.0 / k as f64);
    let mut avg = vec![T::zero(); q * n * ns];
    for qi in 0..q {
        for ni in 0..n {
            for ki in 0..k {
                avg[(qi * n + ni) * ns + ni * k + ki] = inv;
            }
        }
    }
    let avg = tape.constant(Tensor::new(&[q, n, ns], avg)?);
    let v = tape.reshape(views, &[q, ns, c])?;
    Ok(tape.bmm(avg, v)?)
}

/// Cosine similarity of each class's query view with its prototype, `[Q, N]`.
pub fn class_similarities<T: Real>(tape: &mut Tape<T>, q_bar: Var, s_bar: Var) -> Result<Var> {
    Ok(tape.cosine_sim(q_bar, s_bar)?)
}

/// Mean over queries of `-log softmax(sims / tau)[label]`.
pub fn metric_loss<T: Real>(tape: &mut Tape<T>, sims: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::Param { op: "metric_loss", detail: format!("tau {tau} must be > 0") }.into());
    }
    Ok(tape.cross_entropy(sims, labels, tau)?)
}

/// Cross-entropy of head logits `[B, K]` at global class labels.
pub fn anchor_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.shape(logits)[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::Label { label, classes });
    }
    Ok(tape.cross_entropy(logits, labels, 1.0)?)
}

/// `anchor + lambda * metric`.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, anchor: Var, metric: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(CoreError::config("loss.lambda", format!("{lambda} must be >= 0")));
    }
    let weighted = tape.scale(metric, lambda)?;
    Ok(tape.add(anchor, weighted)?)
}

/// Index of the largest similarity; ties go to the lowest index.
pub fn classify_query<T: Real>(sims: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate().skip(1) {
        if s > sims[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, seed: u64) -> Self {
        let (mean, ci95) = mean_ci95(&accuracies);
        EvalReport { episodes: accuracies.len(), accuracies, mean, ci95, seed }
    }
}

/// Mean and `1.96 * s / sqrt(n)` with the `n - 1` sample deviation.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Independent seed for one stream of a run, mixed with splitmix64.
pub fn stream_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
