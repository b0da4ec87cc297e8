use nbc_core::data::{generate_synthetic_corpus, SynthConfig};
use nbc_core::encoder::{embed_context, ContextTable};
use nbc_core::metapath::{
    context_rows, generate_walks, node_embedding, read_embeddings, train_skipgram, write_embeddings, HeteroGraph,
    MetaPath, NodeType, SkipgramConfig, WalkCorpus,
};
use NodeType::*;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn synthetic_graph() -> HeteroGraph {
    let data = generate_synthetic_corpus(&SynthConfig {
        num_authors: 12,
        posts_per_author: 15,
        ..SynthConfig::default()
    })
    .unwrap();
    HeteroGraph::from_corpus(&data.markets[0]).unwrap()
}

#[test]
fn forced_chain_gives_exactly_that_walk() {
    let mut g = HeteroGraph::new();
    g.add_edge(("u1", U), ("p1", P)).unwrap();
    g.add_edge(("p1", P), ("t1", T)).unwrap();
    g.add_edge(("t1", T), ("u2", U)).unwrap();
    let path = MetaPath::parse("UPTU").unwrap();
    let walks = generate_walks(&g, &[path], 3, 0).unwrap();
    let u1 = g.find("u1", U).unwrap();
    let expected = vec![u1, g.find("p1", P).unwrap(), g.find("t1", T).unwrap(), g.find("u2", U).unwrap()];
    let from_u1: Vec<_> = walks.walks.iter().filter(|w| w[0] == u1).collect();
    assert_eq!(from_u1.len(), 3);
    assert!(from_u1.iter().all(|w| **w == expected));
    // u2 has no post neighbor, so its walks abort.
    assert!(walks.walks.iter().all(|w| w[0] == u1));
}

#[test]
fn every_walk_conforms_to_its_metapath() {
    let g = synthetic_graph();
    assert!(g.is_heterogeneous());
    let paths = MetaPath::defaults();
    for (k, path) in paths.iter().enumerate() {
        let walks = generate_walks(&g, std::slice::from_ref(path), 4, k as u64).unwrap();
        assert!(!walks.walks.is_empty(), "{path}");
        assert!(walks.walks.iter().all(|w| path.matches(&g, w)), "{path}");
    }
}

#[test]
fn isolated_user_yields_no_walks() {
    let mut g = HeteroGraph::new();
    g.add_node("lonely", U);
    let walks = generate_walks(&g, &MetaPath::defaults(), 5, 0).unwrap();
    assert!(walks.walks.is_empty());
    assert!(generate_walks(&HeteroGraph::new(), &MetaPath::defaults(), 5, 0).is_err());
}

#[test]
fn walks_and_embeddings_are_deterministic() {
    let g = synthetic_graph();
    let a = generate_walks(&g, &MetaPath::defaults(), 3, 9).unwrap();
    let b = generate_walks(&g, &MetaPath::defaults(), 3, 9).unwrap();
    assert_eq!(a, b);
    let cfg = SkipgramConfig {
        dim: 8,
        epochs: 2,
        ..SkipgramConfig::default()
    };
    let ma = train_skipgram(&a, &cfg).unwrap();
    let mb = train_skipgram(&b, &cfg).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(node_embedding(&ma, 0).unwrap().len(), 8);
    assert!(node_embedding(&ma, g.node_count()).is_err());
}

fn toy_corpus() -> WalkCorpus {
    // a and b always together, c only with itself.
    let mut walks = Vec::new();
    for _ in 0..20 {
        walks.push(vec![0, 1, 0, 1, 0, 1]);
        walks.push(vec![2, 2, 2, 2, 2, 2]);
    }
    WalkCorpus {
        walks,
        node_types: vec![U, U, U],
    }
}

#[test]
fn co_occurring_nodes_end_up_closer() {
    let cfg = SkipgramConfig {
        dim: 8,
        epochs: 200,
        ..SkipgramConfig::default()
    };
    let m = train_skipgram(&toy_corpus(), &cfg).unwrap();
    let (a, b, c) = (m.center.row(0), m.center.row(1), m.center.row(2));
    assert!(cosine(a, b) > cosine(a, c), "{} vs {}", cosine(a, b), cosine(a, c));
    assert!(cosine(a, b) > cosine(b, c));
}

#[test]
fn training_objective_falls() {
    let g = synthetic_graph();
    let walks = generate_walks(&g, &MetaPath::defaults(), 5, 0).unwrap();
    let m = train_skipgram(
        &walks,
        &SkipgramConfig {
            dim: 16,
            epochs: 10,
            ..SkipgramConfig::default()
        },
    )
    .unwrap();
    let l = &m.epoch_losses;
    assert_eq!(l.len(), 10);
    assert!(l[9] < l[0], "{l:?}");
    let rises = l.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
    assert!(rises <= 2, "{l:?}");
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let base = SkipgramConfig {
        dim: 4,
        epochs: 0,
        ..SkipgramConfig::default()
    };
    let a = train_skipgram(&toy_corpus(), &base).unwrap();
    let b = train_skipgram(&toy_corpus(), &base).unwrap();
    assert_eq!(a.center, b.center);
    assert!(a.context.data().iter().all(|&x| x == 0.0));
    assert!(a.epoch_losses.is_empty());
    assert!(train_skipgram(&WalkCorpus::default(), &base).is_err());
}

#[test]
fn exported_embeddings_initialize_context_rows() {
    let data = generate_synthetic_corpus(&SynthConfig {
        num_authors: 8,
        posts_per_author: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = &data.markets[0];
    let g = HeteroGraph::from_corpus(corpus).unwrap();
    let walks = generate_walks(&g, &MetaPath::defaults(), 3, 0).unwrap();
    let m = train_skipgram(
        &walks,
        &SkipgramConfig {
            dim: 6,
            epochs: 1,
            ..SkipgramConfig::default()
        },
    )
    .unwrap();
    let rows = context_rows(&g, &m, corpus.subforums()).unwrap();
    let ctx = ContextTable::from_rows(&rows).unwrap();
    let s0 = g.find(&corpus.subforums()[0], S).unwrap();
    assert_eq!(embed_context(&ctx, 0).unwrap(), node_embedding(&m, s0).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    write_embeddings(&path, &g, &m).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.len(), g.node_count());
    assert_eq!(back[&(corpus.subforums()[0].clone(), S)], rows[0]);
}
