//! Automatic metrics: cosine similarity of critic-trunk face features and
//! top-k identity retrieval with the classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::critics::{Critics, FEATURE_DIM};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::generator::FaceImage;
use crate::training::TrainedModels;

pub const DEFAULT_BASELINE_PAIRS: usize = 1000;
pub const DEFAULT_TOP_K: usize = 5;

/// 64-d critic-trunk embedding of a face.
pub fn face_embed(f: &FaceImage, critics: &Critics) -> Result<Vec<f64>> {
    let v = critics.trunk_features(f)?;
    debug_assert_eq!(v.len(), FEATURE_DIM);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 {
        return Err(Error::UndefinedSimilarity("first vector is zero"));
    }
    if nb == 0.0 {
        return Err(Error::UndefinedSimilarity("second vector is zero"));
    }
    // sqrt of a rounded square is exact, so cosine(x, x) == 1 and cosine(x, -x) == -1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// A proposal face of A, a voice of B and a reference face of B.
#[derive(Debug, Clone)]
pub struct EvalTriple {
    pub id_a: usize,
    pub face_a: FaceImage,
    pub id_b: usize,
    pub voice_b: MelSpectrogram,
    pub face_b: FaceImage,
}

/// Every (face of A, voice of B) pair with `A != B`. The reference face of B
/// cycles through B's faces by the voice index.
pub fn eval_triples(corpus: &Corpus) -> Vec<EvalTriple> {
    let mut out = Vec::new();
    for (a, faces_a) in corpus.faces.iter().enumerate() {
        for face_a in faces_a {
            for (b, voices_b) in corpus.voices.iter().enumerate() {
                if a == b || corpus.faces[b].is_empty() {
                    continue;
                }
                for (j, voice_b) in voices_b.iter().enumerate() {
                    out.push(EvalTriple {
                        id_a: a,
                        face_a: face_a.clone(),
                        id_b: b,
                        voice_b: voice_b.clone(),
                        face_b: corpus.faces[b][j % corpus.faces[b].len()].clone(),
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub cos_g_a: f64,
    pub cos_g_b: f64,
    pub cos_random: f64,
    pub triples: usize,
    pub baseline_pairs: usize,
    pub baseline_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RetrievalTarget {
    A,
    #[default]
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top_k: usize,
    pub target: RetrievalTarget,
    pub success_rate: f64,
    pub successes: usize,
    pub queries: usize,
    /// Top-k identity indices per query, best first.
    pub ranked: Vec<Vec<usize>>,
}

/// Generated faces and the pieces the metrics need from each triple.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub triples: Vec<EvalTriple>,
    pub generated: Vec<FaceImage>,
}

pub fn generate_set(triples: Vec<EvalTriple>, models: &TrainedModels) -> Result<GeneratedSet> {
    if triples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut generated = Vec::with_capacity(triples.len());
    for t in &triples {
        let e = models.embed(&t.voice_b)?;
        generated.push(models.generator.generate(&t.face_a, &e)?);
    }
    Ok(GeneratedSet { triples, generated })
}

/// Mean cosine over `pairs` uniformly drawn pairs of distinct faces.
pub fn random_pair_baseline(faces: &[FaceImage], critics: &Critics, pairs: usize, seed: u64) -> Result<f64> {
    if faces.len() < 2 {
        return Err(Error::Data("random baseline needs at least two faces".into()));
    }
    if pairs == 0 {
        return Err(Error::InvalidInput("random baseline needs at least one pair".into()));
    }
    let emb: Vec<Vec<f64>> = faces.iter().map(|f| face_embed(f, critics)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..faces.len());
        let mut j = rng.random_range(0..faces.len() - 1);
        if j >= i {
            j += 1;
        }
        total += cosine(&emb[i], &emb[j])?;
    }
    Ok(total / pairs as f64)
}

pub fn similarity_report(
    set: &GeneratedSet,
    real_faces: &[FaceImage],
    critics: &Critics,
    baseline_pairs: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if set.triples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let (mut sa, mut sb) = (0.0, 0.0);
    for (t, g) in set.triples.iter().zip(&set.generated) {
        let eg = face_embed(g, critics)?;
        sa += cosine(&eg, &face_embed(&t.face_a, critics)?)?;
        sb += cosine(&eg, &face_embed(&t.face_b, critics)?)?;
    }
    let n = set.triples.len() as f64;
    Ok(SimilarityReport {
        cos_g_a: sa / n,
        cos_g_b: sb / n,
        cos_random: random_pair_baseline(real_faces, critics, baseline_pairs, seed)?,
        triples: set.triples.len(),
        baseline_pairs,
        baseline_seed: seed,
    })
}

/// Generates each triple and reports mean cos(g, A), cos(g, B) and the
/// random-pair baseline over the corpus's faces.
pub fn eval_similarity(corpus: &Corpus, models: &TrainedModels, seed: u64) -> Result<SimilarityReport> {
    let set = generate_set(eval_triples(corpus), models)?;
    let faces: Vec<FaceImage> = corpus.faces.iter().flatten().cloned().collect();
    similarity_report(&set, &faces, &models.critics, DEFAULT_BASELINE_PAIRS, seed)
}

/// Indices of the `k` largest scores, ties broken by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidK {
            k,
            identities: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    Ok(idx)
}

/// Retrieval over precomputed score rows.
pub fn retrieval_from_scores(
    scores: &[Vec<f64>],
    targets: &[usize],
    k: usize,
    target: RetrievalTarget,
) -> Result<RetrievalReport> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::Data(format!(
            "retrieval needs one target per query ({} queries, {} targets)",
            scores.len(),
            targets.len()
        )));
    }
    let mut ranked = Vec::with_capacity(scores.len());
    let mut successes = 0;
    for (row, &t) in scores.iter().zip(targets) {
        let top = top_k(row, k)?;
        if top.contains(&t) {
            successes += 1;
        }
        ranked.push(top);
    }
    Ok(RetrievalReport {
        top_k: k,
        target,
        success_rate: successes as f64 / scores.len() as f64,
        successes,
        queries: scores.len(),
        ranked,
    })
}

pub fn retrieval_report(
    set: &GeneratedSet,
    critics: &Critics,
    k: usize,
    target: RetrievalTarget,
) -> Result<RetrievalReport> {
    if k == 0 || k > critics.identities() {
        return Err(Error::InvalidK {
            k,
            identities: critics.identities(),
        });
    }
    let scores: Vec<Vec<f64>> = set
        .generated
        .iter()
        .map(|g| critics.classify(g))
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = set
        .triples
        .iter()
        .map(|t| match target {
            RetrievalTarget::A => t.id_a,
            RetrievalTarget::B => t.id_b,
        })
        .collect();
    retrieval_from_scores(&scores, &targets, k, target)
}

pub fn eval_retrieval(
    corpus: &Corpus,
    models: &TrainedModels,
    k: usize,
    target: RetrievalTarget,
) -> Result<RetrievalReport> {
    let set = generate_set(eval_triples(corpus), models)?;
    retrieval_report(&set, &models.critics, k, target)
}

/// Everything the `eval` command writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub identities: usize,
    pub similarity: SimilarityReport,
    pub retrieval_b: RetrievalReport,
    pub retrieval_a: RetrievalReport,
}

pub fn evaluate(corpus: &Corpus, models: &TrainedModels, k: usize, seed: u64) -> Result<EvalReport> {
    let set = generate_set(eval_triples(corpus), models)?;
    let faces: Vec<FaceImage> = corpus.faces.iter().flatten().cloned().collect();
    Ok(EvalReport {
        identities: corpus.identity_count(),
        similarity: similarity_report(&set, &faces, &models.critics, DEFAULT_BASELINE_PAIRS, seed)?,
        retrieval_b: retrieval_report(&set, &models.critics, k, RetrievalTarget::B)?,
        retrieval_a: retrieval_report(&set, &models.critics, k, RetrievalTarget::A)?,
    })
}
