use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use super::{Corpus, CrossLabelMap, DataError, Post, Result};

/// Symbols emitted by the style chains.
pub const ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz .,!?'";

/// 2020-01-06, a Monday.
const EPOCH_START: u64 = 1_578_268_800;
const DAY: u64 = 86_400;

const ARTIFACT_KINDS: usize = 5;

/// Knobs of the synthetic generator. `num_authors` counts accounts per market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_authors: usize,
    pub num_markets: usize,
    pub posts_per_author: usize,
    /// Share of each later market's accounts run by an author from the
    /// previous market.
    pub migration_fraction: f64,
    /// Share of accounts that only post in the second half of the timeline.
    pub late_fraction: f64,
    /// Mixing weight of an author's own transition rows against the shared
    /// base language, in [0, 1].
    pub style_strength: f64,
    /// Dirichlet concentration of author transition rows; lower is peakier.
    pub style_concentration: f64,
    pub num_subforums: usize,
    pub threads_per_subforum: usize,
    pub min_mean_len: f64,
    pub max_mean_len: f64,
    /// Mean chance that a post carries a link, signature, quote, image or hash.
    pub artifact_rate: f64,
    pub days: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_authors: 50,
            num_markets: 2,
            posts_per_author: 40,
            migration_fraction: 0.2,
            late_fraction: 0.1,
            style_strength: 0.5,
            style_concentration: 0.5,
            num_subforums: 8,
            threads_per_subforum: 12,
            min_mean_len: 40.0,
            max_mean_len: 120.0,
            artifact_rate: 0.2,
            days: 364,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSynth(m.to_string()));
        if self.num_authors < 2 {
            return bad("num_authors must be at least 2");
        }
        if self.num_markets == 0 {
            return bad("num_markets must be positive");
        }
        if self.posts_per_author == 0 {
            return bad("posts_per_author must be positive");
        }
        if self.num_subforums == 0 || self.threads_per_subforum == 0 {
            return bad("need at least one subforum and thread");
        }
        for (name, v) in [
            ("migration_fraction", self.migration_fraction),
            ("late_fraction", self.late_fraction),
            ("style_strength", self.style_strength),
            ("artifact_rate", self.artifact_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::InvalidSynth(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.style_concentration > 0.0) {
            return bad("style_concentration must be positive");
        }
        if !(self.min_mean_len >= 1.0 && self.max_mean_len >= self.min_mean_len) {
            return bad("need 1 <= min_mean_len <= max_mean_len");
        }
        if self.days < 14 {
            return bad("days must be at least 14");
        }
        Ok(())
    }
}

/// Latent habits of one author.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorStyle {
    /// Row-stochastic order-1 transition matrix over [`ALPHABET`].
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub subforums: Vec<f64>,
    pub days: [f64; 7],
    pub artifact_rate: f64,
    /// Weights over link, signature, quote, image and hash artifacts.
    pub artifacts: [f64; ARTIFACT_KINDS],
    pub mean_len: f64,
}

fn dirichlet<R: Rng>(rng: &mut R, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn base_language(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let n = ALPHABET.len();
    (0..n)
        .map(|_| {
            let mut row = dirichlet(&mut rng, n, 0.3);
            // keep words from running on forever
            row[26] += 0.15;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            row
        })
        .collect()
}

impl AuthorStyle {
    pub fn random<R: Rng>(rng: &mut R, base: &[Vec<f64>], cfg: &SynthConfig) -> Self {
        let n = ALPHABET.len();
        let d = cfg.style_strength;
        let transitions = base
            .iter()
            .map(|row| {
                let own = dirichlet(rng, n, cfg.style_concentration);
                row.iter().zip(own).map(|(b, o)| (1.0 - d) * b + d * o).collect()
            })
            .collect();
        let initial = dirichlet(rng, n, 1.0);
        let subforums = dirichlet(rng, cfg.num_subforums, 0.5);
        let mut days = [0.0; 7];
        days.copy_from_slice(&dirichlet(rng, 7, 0.7));
        let mut artifacts = [0.0; ARTIFACT_KINDS];
        artifacts.copy_from_slice(&dirichlet(rng, ARTIFACT_KINDS, 0.5));
        Self {
            transitions,
            initial,
            subforums,
            days,
            artifact_rate: (cfg.artifact_rate * 2.0 * rng.random::<f64>()).min(1.0),
            artifacts,
            mean_len: rng.random_range(cfg.min_mean_len..=cfg.max_mean_len),
        }
    }
}

fn word<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| ALPHABET[rng.random_range(0..26)] as char).collect()
}

fn artifact<R: Rng>(rng: &mut R, kind: usize) -> String {
    match kind {
        0 => format!("http://{}.onion/{}", word(rng, 16), word(rng, 5)),
        1 => format!("-----BEGIN PGP SIGNATURE-----\n{}\n-----END PGP SIGNATURE-----", word(rng, 40)),
        2 => format!("[quote={}]{}[/quote]", word(rng, 6), word(rng, 20)),
        3 => format!("[img]http://img.host/{}.png[/img]", word(rng, 8)),
        _ => (0..40).map(|_| char::from_digit(rng.random_range(0..16), 16).unwrap()).collect(),
    }
}

/// Samples `count` raw post texts from an author's style.
pub fn generate_author_posts<R: Rng>(style: &AuthorStyle, count: usize, rng: &mut R) -> Vec<String> {
    let rows: Vec<WeightedIndex<f64>> = style
        .transitions
        .iter()
        .map(|r| WeightedIndex::new(r).expect("valid transition row"))
        .collect();
    let initial = WeightedIndex::new(&style.initial).expect("valid initial distribution");
    let kinds = WeightedIndex::new(style.artifacts).expect("valid artifact weights");
    let length = Poisson::new(style.mean_len).expect("positive mean length");
    (0..count)
        .map(|_| {
            let len = (length.sample(rng) as usize).max(1);
            let mut state = initial.sample(rng);
            let mut text = String::with_capacity(len + 64);
            text.push(ALPHABET[state] as char);
            for _ in 1..len {
                state = rows[state].sample(rng);
                text.push(ALPHABET[state] as char);
            }
            if rng.random::<f64>() < style.artifact_rate {
                let kind = kinds.sample(rng);
                let a = artifact(rng, kind);
                if rng.random::<bool>() {
                    text = format!("{a} {text}");
                } else {
                    text.push(' ');
                    text.push_str(&a);
                }
            }
            text
        })
        .collect()
}

/// Generated markets plus the ground-truth migrant map.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub markets: Vec<Corpus>,
    pub cross: CrossLabelMap,
}

/// Builds `num_markets` market corpora of `num_authors` accounts each.
///
/// Byte-identical for a fixed config. Accounts in market `m + 1` chosen as
/// migrants reuse the full style of a market-`m` account under a new name.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = base_language(cfg.seed);
    let weeks = cfg.days / 7;
    let half = weeks / 2;

    let mut markets = Vec::with_capacity(cfg.num_markets);
    let mut styles_prev: Vec<AuthorStyle> = Vec::new();
    let mut pairs = Vec::new();
    for m in 0..cfg.num_markets {
        let market = format!("M{m}");
        let n_migrants = if m == 0 {
            0
        } else {
            (cfg.migration_fraction * cfg.num_authors as f64).round() as usize
        };
        let donors: BTreeMap<usize, usize> = if n_migrants > 0 {
            let accounts = sample(&mut rng, cfg.num_authors, n_migrants);
            let sources = sample(&mut rng, cfg.num_authors, n_migrants);
            accounts.iter().zip(sources.iter()).collect()
        } else {
            BTreeMap::new()
        };
        let late = (cfg.late_fraction * cfg.num_authors as f64).round() as usize;
        let late_accounts: Vec<usize> = sample(&mut rng, cfg.num_authors, late).into_vec();

        let mut styles = Vec::with_capacity(cfg.num_authors);
        let mut posts = Vec::with_capacity(cfg.num_authors * cfg.posts_per_author);
        for a in 0..cfg.num_authors {
            let name = format!("{}_u{a:03}", market.to_lowercase());
            let style = match donors.get(&a) {
                Some(&src) => {
                    pairs.push((
                        (format!("M{}", m - 1), format!("m{}_u{src:03}", m - 1)),
                        (market.clone(), name.clone()),
                    ));
                    styles_prev[src].clone()
                }
                None => AuthorStyle::random(&mut rng, &base, cfg),
            };
            let texts = generate_author_posts(&style, cfg.posts_per_author, &mut rng);
            let sub = WeightedIndex::new(&style.subforums).expect("valid subforum weights");
            let dow = WeightedIndex::new(style.days).expect("valid day weights");
            let first_week = if late_accounts.contains(&a) { half + 1 } else { 0 };
            for text in texts {
                let week = rng.random_range(first_week..weeks);
                let day = week * 7 + dow.sample(&mut rng) as u64;
                let s = sub.sample(&mut rng);
                posts.push(Post {
                    market: market.clone(),
                    author: name.clone(),
                    timestamp: EPOCH_START + day * DAY + rng.random_range(0..DAY),
                    subforum: format!("sf{s}"),
                    thread: format!("sf{s}-t{}", rng.random_range(0..cfg.threads_per_subforum)),
                    text,
                });
            }
            styles.push(style);
        }
        posts.sort_by(|a, b| (a.timestamp, &a.author).cmp(&(b.timestamp, &b.author)));
        markets.push(Corpus::new(posts)?);
        styles_prev = styles;
    }
    Ok(SyntheticData {
        markets,
        cross: CrossLabelMap::from_pairs(&pairs),
    })
}
