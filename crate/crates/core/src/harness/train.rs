use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, HarnessError, Model, Momentum, Result, RunConfig, Task, TaskParams};
use crate::data::{
    apply_cross_labels, build_episodes, temporal_split, Corpus, CrossLabelMap, EpisodeSet, Episodes, CROSS_MARKET,
};
use crate::encoder::{encode_batch, ContextTable, EncoderParams, EncoderVars};
use crate::harness::config::ContextInit;
use crate::losses::{batch_loss, class_mean_block, negative_block_term, ClassifierHead, LossKind, NegativeSchedule};
use crate::metapath::{generate_walks, train_skipgram, HeteroGraph, MetaPath, NodeType, SkipgramConfig};
use crate::retrieval::{rank_all, MetricReport, CSV_HEADER, DEFAULT_KS};
use crate::tensor::{Mode, Tape, Tensor, TensorError, Var};

/// Episodes of one task after preprocessing and the temporal split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: Episodes,
    /// Empty for the CROSS task, which only trains.
    pub test: Episodes,
    pub subforums: Vec<String>,
    pub train_corpus: Corpus,
}

impl TaskData {
    fn evaluated(&self) -> bool {
        self.name != CROSS_MARKET
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub lr: f64,
}

/// Test-split retrieval results of one market.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    /// `authors[label]`.
    pub authors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub evaluations: BTreeMap<String, Evaluation>,
}

impl TrainOutcome {
    pub fn reports(&self) -> BTreeMap<String, MetricReport> {
        self.evaluations.iter().map(|(k, e)| (k.clone(), e.report.clone())).collect()
    }

    /// MRR averaged over evaluated markets.
    pub fn mean_mrr(&self) -> f64 {
        let n = self.evaluations.len().max(1) as f64;
        self.evaluations.values().map(|e| e.report.mrr).sum::<f64>() / n
    }

    pub fn curve(&self) -> &[EpochStats] {
        &self.checkpoint.curve
    }
}

fn market_name(c: &Corpus) -> Result<String> {
    c.market()
        .map(str::to_string)
        .ok_or_else(|| HarnessError::Data("empty market corpus".into()))
}

/// Preprocesses, splits and cuts every market into episodes; adds a CROSS
/// task built from the training halves when the map is non-empty.
pub fn prepare_tasks(cfg: &RunConfig, markets: &[Corpus], cross: Option<&CrossLabelMap>) -> Result<Vec<TaskData>> {
    let (l, min_posts, max_len) = (cfg.episode_length, cfg.min_posts(), cfg.dims.max_len);
    let mut tasks = Vec::with_capacity(markets.len() + 1);
    let mut names = BTreeSet::new();
    let mut full = Vec::with_capacity(markets.len());
    let mut train_halves = Vec::with_capacity(markets.len());
    for corpus in markets {
        let name = market_name(corpus)?;
        if name == CROSS_MARKET || !names.insert(name.clone()) {
            return Err(HarnessError::Data(format!("duplicate or reserved market name {name:?}")));
        }
        if corpus.posts().iter().any(|p| p.market != name) {
            return Err(HarnessError::Data(format!("corpus {name} mixes markets")));
        }
        let pre = corpus.preprocessed();
        let (train, test) = temporal_split(&pre)?;
        tasks.push(TaskData {
            name,
            train: build_episodes(&train, l, min_posts, max_len),
            test: build_episodes(&test, l, min_posts, max_len),
            subforums: pre.subforums().to_vec(),
            train_corpus: train.clone(),
        });
        full.push(pre);
        train_halves.push(train);
    }
    if let Some(map) = cross.filter(|m| !m.is_empty()) {
        apply_cross_labels(&full, map)?;
        let present: BTreeSet<(&str, &str)> = train_halves
            .iter()
            .flat_map(|c| c.posts().iter().map(|p| (p.market.as_str(), p.author.as_str())))
            .collect();
        let kept = map
            .entries()
            .filter(|((m, a), _)| present.contains(&(m.as_str(), a.as_str())))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let cross_corpus = apply_cross_labels(&train_halves, &CrossLabelMap::from_assignments(kept))?;
        let train = build_episodes(&cross_corpus, l, min_posts, max_len);
        if train.authors.len() >= 2 {
            tasks.push(TaskData {
                name: CROSS_MARKET.to_string(),
                train,
                test: Episodes::default(),
                subforums: cross_corpus.subforums().to_vec(),
                train_corpus: cross_corpus,
            });
        } else {
            log::warn!("CROSS task skipped: fewer than two linked authors with enough training posts");
        }
    }
    for t in &tasks {
        if t.train.authors.len() < 2 {
            return Err(HarnessError::Data(format!(
                "task {} has {} training authors; need at least 2",
                t.name,
                t.train.authors.len()
            )));
        }
    }
    Ok(tasks)
}

fn metapath_context<R: Rng>(cfg: &RunConfig, task: &TaskData, rng: &mut R) -> Result<ContextTable> {
    let d = cfg.dims.d_ctx;
    let fallback = ContextTable::random(task.subforums.len(), d, rng);
    let graph = HeteroGraph::from_corpus(&task.train_corpus)?;
    let walks = generate_walks(&graph, &MetaPath::defaults(), cfg.walks_per_node, cfg.seed)?;
    if walks.walks.is_empty() {
        return Ok(fallback);
    }
    let model = train_skipgram(
        &walks,
        &SkipgramConfig {
            dim: d,
            epochs: cfg.skipgram_epochs,
            seed: cfg.seed,
            ..SkipgramConfig::default()
        },
    )?;
    let rows = task
        .subforums
        .iter()
        .enumerate()
        .map(|(i, s)| match graph.find(s, NodeType::S) {
            Some(node) => model.center.row(node).to_vec(),
            None => fallback.table.row(i).to_vec(),
        })
        .collect::<Vec<_>>();
    Ok(ContextTable::from_rows(&rows)?)
}

/// Fresh parameters: encoder first, then each task's table and head in
/// task-name order, all from one seeded stream.
pub fn init_model(cfg: &RunConfig, tasks: &[TaskData]) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = EncoderParams::random(cfg.dims.clone(), &mut rng)?;
    let (scale, margin) = cfg.head_scale_margin();
    let mut sorted: Vec<&TaskData> = tasks.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = BTreeMap::new();
    for task in sorted {
        let context = match cfg.context_init {
            ContextInit::Random => ContextTable::random(task.subforums.len(), cfg.dims.d_ctx, &mut rng),
            ContextInit::Metapath => metapath_context(cfg, task, &mut rng)?,
        };
        let head = ClassifierHead::random(task.train.authors.len(), cfg.dims.embed, scale, margin, &mut rng)?;
        out.insert(
            task.name.clone(),
            TaskParams {
                context,
                head,
                authors: task.train.authors.clone(),
                subforums: task.subforums.clone(),
            },
        );
    }
    Ok(Model { encoder, tasks: out })
}

struct Registered {
    tape: Tape,
    vars: Vec<Var>,
    enc: EncoderVars,
    ctx: Var,
    head: Var,
}

/// Registers every model parameter as a leaf, so gradient masks show exactly
/// which parameters a step touched.
fn register(model: &Model, task: &str) -> Result<Registered> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params().into_iter().map(|p| tape.param(p.clone())).collect();
    let n_enc = model.encoder.tensors().len();
    let enc = EncoderVars::from_flat(&model.encoder.dims, &vars[..n_enc])?;
    let ti = model
        .tasks
        .keys()
        .position(|k| k == task)
        .ok_or_else(|| HarnessError::Data(format!("unknown task {task:?}")))?;
    Ok(Registered {
        ctx: vars[n_enc + 2 * ti],
        head: vars[n_enc + 2 * ti + 1],
        tape,
        vars,
        enc,
    })
}

/// Loss value and per-parameter gradients (aligned with
/// [`Model::param_names`]) for one batch of a task.
pub fn batch_gradients<R: Rng>(
    model: &Model,
    cfg: &RunConfig,
    task: &str,
    sets: &[&EpisodeSet],
    rng: &mut R,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut r = register(model, task)?;
    let labels: Vec<usize> = sets.iter().map(|s| s.author_label).collect();
    let z = encode_batch(&mut r.tape, &r.enc, &model.encoder.dims, r.ctx, sets, Mode::Train, rng)?;
    let head = &model.task(task)?.head;
    let loss = batch_loss(&mut r.tape, cfg.loss, z, &labels, r.head, head, &cfg.loss_config())?;
    finish(r, loss)
}

/// `(1 − α) · l_neg` over the class means of all of a task's training sets.
fn epoch_negative_gradients<R: Rng>(
    model: &Model,
    cfg: &RunConfig,
    task: &str,
    sets: &[&EpisodeSet],
    rng: &mut R,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut r = register(model, task)?;
    let labels: Vec<usize> = sets.iter().map(|s| s.author_label).collect();
    let z = encode_batch(&mut r.tape, &r.enc, &model.encoder.dims, r.ctx, sets, Mode::Train, rng)?;
    let (means, _) = class_mean_block(&mut r.tape, z, &labels)?;
    let neg = negative_block_term(&mut r.tape, means, &cfg.loss_config())?.loss;
    let loss = r.tape.scale(neg, 1.0 - cfg.alpha)?;
    finish(r, loss)
}

fn finish(mut r: Registered, loss: Var) -> Result<(f64, Vec<Option<Tensor>>)> {
    let value = r.tape.value(loss).item();
    if r.tape.op_count() > 0 && r.tape.requires_grad(loss) {
        r.tape.backward(loss)?;
    }
    Ok((value, r.vars.iter().map(|&v| r.tape.grad(v).cloned()).collect()))
}

fn apply(model: &mut Model, opt: &mut Momentum, grads: Vec<Option<Tensor>>, lr: f64) {
    let names = model.param_names();
    for ((name, param), grad) in names.iter().zip(model.params_mut()).zip(grads) {
        if let Some(g) = grad {
            opt.update(name, param, &g, lr);
        }
    }
    opt.steps += 1;
}

fn is_divergence(e: &HarnessError) -> bool {
    matches!(
        e,
        HarnessError::Tensor(TensorError::NonFinite { .. })
            | HarnessError::Encoder(crate::encoder::EncoderError::Tensor(TensorError::NonFinite { .. }))
            | HarnessError::Loss(crate::losses::LossError::Tensor(TensorError::NonFinite { .. }))
    )
}

fn snapshot(cfg: &RunConfig, model: &Model, opt: &Momentum, epoch: usize, curve: &[EpochStats]) -> Checkpoint {
    Checkpoint {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        model: model.clone(),
        optimizer: opt.clone(),
        epoch,
        curve: curve.to_vec(),
    }
}

/// Interleaves each task's batches: one from every task in turn.
fn round_robin(per_task: Vec<Vec<Vec<usize>>>) -> Vec<(usize, Vec<usize>)> {
    let longest = per_task.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut iters: Vec<_> = per_task.into_iter().map(Vec::into_iter).collect();
    for _ in 0..longest {
        for (t, it) in iters.iter_mut().enumerate() {
            if let Some(b) = it.next() {
                out.push((t, b));
            }
        }
    }
    out
}

/// Trains on prepared tasks from a fresh model.
pub fn train_tasks(cfg: &RunConfig, tasks: &[TaskData]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = init_model(cfg, tasks)?;
    continue_training(cfg, tasks, model, Momentum::new(cfg.momentum), Vec::new())
}

fn continue_training(
    cfg: &RunConfig,
    tasks: &[TaskData],
    mut model: Model,
    mut opt: Momentum,
    mut curve: Vec<EpochStats>,
) -> Result<TrainOutcome> {
    let steps_per_epoch: usize = tasks.iter().map(|t| t.train.sets.len().div_ceil(cfg.batch_size)).sum();
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch).max(1);
    let epoch_negatives = cfg.loss == LossKind::Nbc && cfg.schedule == NegativeSchedule::Epoch && cfg.alpha < 1.0;

    for epoch in curve.len()..cfg.epochs {
        let last_good = snapshot(cfg, &model, &opt, epoch, &curve);
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(2 * epoch as u64 + 1);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(2 * epoch as u64 + 2);
        let per_task: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .map(|t| {
                let mut idx: Vec<usize> = (0..t.train.sets.len()).collect();
                idx.shuffle(&mut order_rng);
                idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let (mut total, mut steps, mut lr) = (0.0, 0usize, cfg.lr);
        let run_epoch = || -> Result<()> {
            for (ti, batch) in round_robin(per_task) {
                let task = &tasks[ti];
                let sets: Vec<&EpisodeSet> = batch.iter().map(|&i| &task.train.sets[i]).collect();
                let (loss, grads) = batch_gradients(&model, cfg, &task.name, &sets, &mut dropout_rng)?;
                if !loss.is_finite() {
                    return Err(HarnessError::Tensor(TensorError::NonFinite { op: "loss" }));
                }
                lr = cfg.lr * ((opt.steps + 1) as f64 / warmup_steps as f64).min(1.0);
                apply(&mut model, &mut opt, grads, lr);
                total += loss;
                steps += 1;
            }
            if epoch_negatives {
                for task in tasks {
                    let sets: Vec<&EpisodeSet> = task.train.sets.iter().collect();
                    let (loss, grads) = epoch_negative_gradients(&model, cfg, &task.name, &sets, &mut dropout_rng)?;
                    if !loss.is_finite() {
                        return Err(HarnessError::Tensor(TensorError::NonFinite { op: "loss" }));
                    }
                    apply(&mut model, &mut opt, grads, lr);
                }
            }
            Ok(())
        };
        match run_epoch() {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => {
                return Err(HarnessError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                })
            }
            Err(e) => return Err(e),
        }
        let mean_loss = total / steps.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.5} over {steps} steps, lr {lr:.5}");
        curve.push(EpochStats {
            epoch,
            mean_loss,
            steps,
            lr,
        });
    }
    let checkpoint = snapshot(cfg, &model, &opt, cfg.epochs, &curve);
    let evaluations = evaluate_model(cfg, &model, tasks)?;
    Ok(TrainOutcome {
        checkpoint,
        evaluations,
    })
}

/// Retrieval on each market's test episodes.
pub fn evaluate_model(cfg: &RunConfig, model: &Model, tasks: &[TaskData]) -> Result<BTreeMap<String, Evaluation>> {
    let mut out = BTreeMap::new();
    for task in tasks.iter().filter(|t| t.evaluated()) {
        if task.test.sets.is_empty() {
            return Err(HarnessError::Data(format!("task {} has no test episodes", task.name)));
        }
        let sets: Vec<&EpisodeSet> = task.test.sets.iter().collect();
        let embeddings = model.embed(&task.name, &sets)?;
        let labels = task.test.labels();
        let rankings = rank_all(&embeddings, &labels, cfg.measure)?;
        out.insert(
            task.name.clone(),
            Evaluation {
                report: MetricReport::from_rankings(&rankings, &DEFAULT_KS)?,
                embeddings,
                labels,
                authors: task.test.authors.clone(),
            },
        );
    }
    Ok(out)
}

/// One market, no CROSS task.
pub fn train_singletask(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let tasks = prepare_tasks(cfg, std::slice::from_ref(corpus), None)?;
    train_tasks(cfg, &tasks)
}

/// Several markets with a shared encoder, plus a CROSS task when `cross`
/// links accounts across them.
pub fn train_multitask(cfg: &RunConfig, markets: &[Corpus], cross: Option<&CrossLabelMap>) -> Result<TrainOutcome> {
    if markets.len() < 2 {
        return Err(HarnessError::Data(format!("multitask needs at least 2 markets, got {}", markets.len())));
    }
    let tasks = prepare_tasks(cfg, markets, cross)?;
    train_tasks(cfg, &tasks)
}

/// Dispatches on `cfg.task`.
pub fn run(cfg: &RunConfig, markets: &[Corpus], cross: Option<&CrossLabelMap>) -> Result<TrainOutcome> {
    match cfg.task {
        Task::Singletask => {
            let [corpus] = markets else {
                return Err(HarnessError::Data(format!("singletask needs exactly 1 market, got {}", markets.len())));
            };
            train_singletask(cfg, corpus)
        }
        Task::Multitask => train_multitask(cfg, markets, cross),
    }
}

/// Mean test-embedding cosine of linked account pairs against that of
/// unlinked accounts in different markets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SybilAlignment {
    pub sybil: f64,
    pub random: f64,
    pub sybil_pairs: usize,
    pub random_pairs: usize,
}

pub fn sybil_alignment(outcome: &TrainOutcome, map: &CrossLabelMap) -> Result<SybilAlignment> {
    let mut profiles: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (market, ev) in &outcome.evaluations {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, &y) in ev.labels.iter().enumerate() {
            let e = sums.entry(y).or_insert_with(|| (vec![0.0; ev.embeddings.cols()], 0));
            e.0.iter_mut().zip(ev.embeddings.row(i)).for_each(|(s, x)| *s += x);
            e.1 += 1;
        }
        for (y, (s, n)) in sums {
            profiles.insert(
                (market.clone(), ev.authors[y].clone()),
                s.into_iter().map(|x| x / n as f64).collect(),
            );
        }
    }
    let cos = |a: &[f64], b: &[f64]| crate::retrieval::Measure::Cosine.score(a, b);
    let keys: Vec<&(String, String)> = profiles.keys().collect();
    let (mut s_sum, mut s_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in keys.iter().enumerate() {
        for b in &keys[i + 1..] {
            if a.0 == b.0 {
                continue;
            }
            let c = cos(&profiles[*a], &profiles[*b]);
            match (map.label(&a.0, &a.1), map.label(&b.0, &b.1)) {
                (Some(x), Some(y)) if x == y => {
                    s_sum += c;
                    s_n += 1;
                }
                _ => {
                    r_sum += c;
                    r_n += 1;
                }
            }
        }
    }
    if s_n == 0 || r_n == 0 {
        return Err(HarnessError::Data("no linked pairs present in the test splits".into()));
    }
    Ok(SybilAlignment {
        sybil: s_sum / s_n as f64,
        random: r_sum / r_n as f64,
        sybil_pairs: s_n,
        random_pairs: r_n,
    })
}

/// Writes `metrics.json`, `metrics.csv`, `checkpoint.json` and `curve.csv`.
pub fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = &outcome.checkpoint.config;
    let reports = outcome.reports();
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&reports)?)?;
    let task = match cfg.task {
        Task::Singletask => "singletask",
        Task::Multitask => "multitask",
    };
    let mut csv = format!("{CSV_HEADER}\n");
    for (market, r) in &reports {
        csv.push_str(&r.csv_rows(market, task, cfg.seed));
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    let mut curve = String::from("epoch,mean_loss,steps,lr\n");
    for s in outcome.curve() {
        curve.push_str(&format!("{},{},{},{}\n", s.epoch, s.mean_loss, s.steps, s.lr));
    }
    fs::write(dir.join("curve.csv"), curve)?;
    Ok(())
}

/// Re-evaluates a checkpoint on the corpora it was trained from.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    markets: &[Corpus],
    cross: Option<&CrossLabelMap>,
) -> Result<BTreeMap<String, Evaluation>> {
    let tasks = prepare_tasks(&ck.config, markets, cross)?;
    evaluate_model(&ck.config, &ck.model, &tasks)
}

/// Resumes training from a checkpoint up to `ck.config.epochs`.
pub fn resume(ck: Checkpoint, markets: &[Corpus], cross: Option<&CrossLabelMap>) -> Result<TrainOutcome> {
    let tasks = prepare_tasks(&ck.config, markets, cross)?;
    let cfg = ck.config.clone();
    continue_training(&cfg, &tasks, ck.model, ck.optimizer, ck.curve)
}
