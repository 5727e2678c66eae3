//! Python bindings for the core crate: document parsing and layout sorting,
//! synthetic corpus generation, vocabulary/tokenization, ranking metrics, and
//! run configuration.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use lampret_core::config::Profile;
use lampret_core::eval::{mrr, prf1_at_threshold, recall_at_k, select_tau, RankResult};
use lampret_core::features::{tokenize_wordpiece, Vocab as CoreVocab};
use lampret_core::ingest::{generate_synthetic, parse_html, CorpusSpec};
use lampret_core::layout::{sort_and_serialize, validate_document, Document as CoreDocument};
use lampret_core::RunConfig as CoreRunConfig;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A document: an id plus content blocks with bounding boxes, text,
/// attributes, and inline images.
#[pyclass(name = "Document", skip_from_py_object)]
#[derive(Clone)]
struct PyDocument {
    inner: CoreDocument,
}

#[pymethods]
impl PyDocument {
    /// Deserialize a document from its JSON record form.
    #[staticmethod]
    fn from_json(json: &str) -> PyResult<PyDocument> {
        let inner: CoreDocument = serde_json::from_str(json).map_err(value_err)?;
        Ok(PyDocument { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn doc_id(&self) -> String {
        self.inner.doc_id.clone()
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.inner.blocks.len()
    }

    #[getter]
    fn image_count(&self) -> usize {
        self.inner.image_count()
    }

    #[getter]
    fn is_sorted(&self) -> bool {
        self.inner.sorted
    }

    /// Reading-order sort: returns (sorted document, segment ids 1..=N).
    fn sorted(&self) -> PyResult<(PyDocument, Vec<usize>)> {
        let (doc, segment_ids) = sort_and_serialize(&self.inner).map_err(value_err)?;
        Ok((PyDocument { inner: doc }, segment_ids))
    }

    /// Layout-invariant violations as human-readable strings; empty when clean.
    fn violations(&self) -> Vec<String> {
        validate_document(&self.inner)
            .into_iter()
            .map(|v| match v.block_index {
                Some(i) => format!("block {}: {}", i, v.message),
                None => v.message,
            })
            .collect()
    }

    /// Block texts in stored order.
    fn block_texts(&self) -> Vec<String> {
        self.inner.blocks.iter().map(|b| b.text.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Document(doc_id={:?}, n_blocks={}, images={}, sorted={})",
            self.inner.doc_id,
            self.inner.blocks.len(),
            self.inner.image_count(),
            self.inner.sorted
        )
    }

    fn __len__(&self) -> usize {
        self.inner.blocks.len()
    }
}

/// Token vocabulary with wordpiece-style greedy tokenization.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: CoreVocab,
}

#[pymethods]
impl PyVocab {
    /// Build from a word stream, keeping at most `max_size` entries.
    #[staticmethod]
    fn build_from_words(words: Vec<String>, max_size: usize) -> PyVocab {
        PyVocab {
            inner: CoreVocab::build_from_words(words.iter().map(|s| s.as_str()), max_size),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyVocab> {
        CoreVocab::load(std::path::Path::new(path))
            .map(|inner| PyVocab { inner })
            .map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(value_err)
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(|s| s.to_string())
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize_wordpiece(text, &self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Flat run configuration resolved from a profile plus key=value overrides.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// "desk" or "paper".
    #[new]
    fn new(profile: &str) -> PyResult<PyRunConfig> {
        let p: Profile = profile.parse().map_err(value_err)?;
        Ok(PyRunConfig { inner: CoreRunConfig::for_profile(p) })
    }

    /// Override any flat key, e.g. set("batch_size", "4").
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.apply_kv(key, value).map_err(value_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    /// Canonical TOML form (also the checkpoint-compatibility key).
    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(profile={}, aggregator={}, modality={}, d={})",
            self.inner.profile, self.inner.aggregator, self.inner.modality, self.inner.d
        )
    }
}

/// Parse an HTML page into a document; returns (document, warnings).
#[pyfunction(name = "parse_html")]
fn py_parse_html(html: &Bound<'_, PyBytes>, doc_id: &str) -> PyResult<(PyDocument, Vec<String>)> {
    let outcome = parse_html(html.as_bytes(), doc_id).map_err(value_err)?;
    let warnings = outcome.warnings.iter().map(|w| format!("{w:?}")).collect();
    Ok((PyDocument { inner: outcome.document }, warnings))
}

/// Generate a deterministic synthetic corpus from a JSON corpus spec.
#[pyfunction(name = "generate_corpus")]
fn py_generate_corpus(spec_json: &str) -> PyResult<Vec<PyDocument>> {
    let spec: CorpusSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    spec.validate().map_err(value_err)?;
    Ok(generate_synthetic(&spec)
        .into_iter()
        .map(|inner| PyDocument { inner })
        .collect())
}

fn rank_results(gold_ranks: Vec<usize>, n_candidates: usize) -> PyResult<Vec<RankResult>> {
    gold_ranks
        .into_iter()
        .map(|r| RankResult::new(r, n_candidates).map_err(value_err))
        .collect()
}

/// Mean reciprocal rank over 1-based gold ranks.
#[pyfunction(name = "mrr")]
fn py_mrr(gold_ranks: Vec<usize>, n_candidates: usize) -> PyResult<f64> {
    mrr(&rank_results(gold_ranks, n_candidates)?).map_err(value_err)
}

/// Fraction of instances whose gold rank is <= k.
#[pyfunction(name = "recall_at_k")]
fn py_recall_at_k(gold_ranks: Vec<usize>, n_candidates: usize, k: usize) -> PyResult<f64> {
    Ok(recall_at_k(&rank_results(gold_ranks, n_candidates)?, k))
}

/// Micro-averaged (precision, recall, f1) at distance threshold tau.
#[pyfunction(name = "prf1")]
fn py_prf1(distances: Vec<Vec<f64>>, gold: Vec<usize>, tau: f64) -> (f64, f64, f64) {
    let p = prf1_at_threshold(&distances, &gold, tau);
    (p.precision, p.recall, p.f1)
}

/// Threshold maximizing f1 on a validation set of candidate distances.
#[pyfunction(name = "select_tau")]
fn py_select_tau(distances: Vec<Vec<f64>>, gold: Vec<usize>) -> f64 {
    select_tau(&distances, &gold)
}

#[pymodule]
fn lampret(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDocument>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(py_parse_html, m)?)?;
    m.add_function(wrap_pyfunction!(py_generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(py_mrr, m)?)?;
    m.add_function(wrap_pyfunction!(py_recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(py_prf1, m)?)?;
    m.add_function(wrap_pyfunction!(py_select_tau, m)?)?;
    Ok(())
}
