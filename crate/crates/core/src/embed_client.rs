//! Document embeddings from a pluggable provider: a read-only text cache on
//! disk or an HTTP embeddings service.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{write_embedding_line, DocumentDay, EmbeddingTable};
use crate::error::{MsgcaError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
    pub model: String,
}

impl EmbedRequest {
    pub fn new(texts: Vec<String>, model: impl Into<String>) -> Result<Self> {
        let req = EmbedRequest {
            texts,
            model: model.into(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.texts.is_empty() {
            return Err(MsgcaError::Config("embedding request has no texts".into()));
        }
        if let Some(i) = self.texts.iter().position(|t| t.trim().is_empty()) {
            return Err(MsgcaError::Config(format!(
                "embedding request text {i} is blank"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    File,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub backend: Backend,
    /// Text cache for the file backend: JSONL of `{"text","embedding"}`.
    pub cache: Option<PathBuf>,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub model: String,
    pub dim: usize,
    pub max_batch: usize,
    pub max_parallel: usize,
    /// First retry delay; doubles on every further attempt.
    pub retry_base_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            backend: Backend::File,
            cache: None,
            endpoint: None,
            token_env: None,
            model: "text-embedding-ada-002".into(),
            dim: 1536,
            max_batch: 64,
            max_parallel: 4,
            retry_base_ms: 250,
            timeout_secs: 60,
        }
    }
}

pub const MAX_ATTEMPTS: u32 = 3;

impl ProviderConfig {
    fn validate_sizes(&self) -> Result<()> {
        if self.dim == 0 || self.max_batch == 0 || self.max_parallel == 0 {
            return Err(MsgcaError::Config(
                "dim, max_batch and max_parallel must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_sizes()?;
        match self.backend {
            Backend::File if self.cache.is_none() => {
                Err(MsgcaError::Config("file backend needs a cache path".into()))
            }
            Backend::Http if self.endpoint.is_none() => {
                Err(MsgcaError::Config("http backend needs an endpoint".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Something that turns a batch of texts into vectors, in order.
pub trait EmbeddingProvider: Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Deserialize)]
struct CacheLine {
    text: String,
    embedding: Vec<f64>,
}

/// Read-only lookup of previously computed text embeddings.
#[derive(Clone, Debug, Default)]
pub struct FileProvider {
    vectors: HashMap<String, Vec<f64>>,
}

impl FileProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| MsgcaError::io(path, e))?;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| MsgcaError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(&line).map_err(|e| {
                MsgcaError::Format(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            vectors.insert(rec.text, rec.embedding);
        }
        Ok(FileProvider { vectors })
    }

    pub fn from_map(vectors: HashMap<String, Vec<f64>>) -> Self {
        FileProvider { vectors }
    }
}

impl EmbeddingProvider for FileProvider {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<String> = texts
            .iter()
            .filter(|t| !self.vectors.contains_key(*t))
            .map(|t| format!("{t:?}"))
            .collect();
        if !missing.is_empty() {
            return Err(MsgcaError::MissingEmbedding(missing));
        }
        Ok(texts.iter().map(|t| self.vectors[t].clone()).collect())
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct HttpItem {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct HttpResponse {
    data: Vec<HttpItem>,
}

/// Client for a `POST {"model","input"}` -> `{"data":[{"index","embedding"}]}`
/// service.
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    retry_base: Duration,
}

impl HttpProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| MsgcaError::Config("http backend needs an endpoint".into()))?;
        let token = match &cfg.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                MsgcaError::Config(format!(
                    "environment variable {var} with the embeddings token is not set"
                ))
            })?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build();
        Ok(HttpProvider {
            agent,
            endpoint,
            model: cfg.model.clone(),
            token,
            retry_base: Duration::from_millis(cfg.retry_base_ms),
        })
    }

    fn attempt(&self, texts: &[String]) -> std::result::Result<Vec<Vec<f64>>, (bool, String)> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let body = HttpRequest {
            model: &self.model,
            input: texts,
        };
        let resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let retry = code == 429 || code >= 500;
                let text = r.into_string().unwrap_or_default();
                return Err((retry, format!("HTTP {code}: {}", text.trim())));
            }
            Err(e) => return Err((true, e.to_string())),
        };
        let mut parsed: HttpResponse = resp
            .into_json()
            .map_err(|e| (false, format!("malformed response: {e}")))?;
        parsed.data.sort_by_key(|d| d.index);
        let indices: Vec<usize> = parsed.data.iter().map(|d| d.index).collect();
        if indices != (0..texts.len()).collect::<Vec<_>>() {
            return Err((
                false,
                format!(
                    "response indices {indices:?} do not cover {} inputs",
                    texts.len()
                ),
            ));
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for HttpProvider {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut delay = self.retry_base;
        let mut last = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err((retry, msg)) => {
                    log::warn!("embedding request attempt {attempt}/{MAX_ATTEMPTS} failed: {msg}");
                    last = msg;
                    if !retry {
                        break;
                    }
                    if attempt < MAX_ATTEMPTS {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(MsgcaError::Provider(last))
    }
}

pub fn provider_from_config(cfg: &ProviderConfig) -> Result<Box<dyn EmbeddingProvider>> {
    cfg.validate()?;
    Ok(match cfg.backend {
        Backend::File => Box::new(FileProvider::load(cfg.cache.as_ref().expect("validated"))?),
        Backend::Http => Box::new(HttpProvider::new(cfg)?),
    })
}

/// Embeds `req.texts` with the backend named in `cfg`.
pub fn embed_texts(req: &EmbedRequest, cfg: &ProviderConfig) -> Result<Vec<Vec<f64>>> {
    req.validate()?;
    let provider = provider_from_config(cfg)?;
    embed_with(provider.as_ref(), &req.texts, cfg)
}

/// Splits `texts` into batches of at most `max_batch`, keeps at most
/// `max_parallel` batches in flight, and returns vectors in input order.
pub fn embed_with(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    cfg: &ProviderConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate_sizes()?;
    let chunks: Vec<&[String]> = texts.chunks(cfg.max_batch).collect();
    type Slot = Option<Result<Vec<Vec<f64>>>>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..chunks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.max_parallel.min(chunks.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(chunk) = chunks.get(i) else { break };
                let r = provider.embed_batch(chunk);
                let failed = r.is_err();
                results.lock().expect("result lock")[i] = Some(r);
                if failed {
                    // stop handing out further batches
                    next.fetch_add(chunks.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(texts.len());
    for (chunk, r) in chunks
        .iter()
        .zip(results.into_inner().expect("result lock"))
    {
        let Some(r) = r else {
            return Err(MsgcaError::Provider(
                "batch skipped after an earlier failure".into(),
            ));
        };
        let vectors = r?;
        if vectors.len() != chunk.len() {
            return Err(MsgcaError::Provider(format!(
                "provider returned {} vectors for {} texts",
                vectors.len(),
                chunk.len()
            )));
        }
        for v in vectors {
            if v.len() != cfg.dim {
                return Err(MsgcaError::Contract {
                    expected: cfg.dim,
                    actual: v.len(),
                });
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Builds (or completes) the per-day embedding table at `out`, using the
/// backend named in `cfg`.
pub fn build_embedding_table(
    days: &[DocumentDay],
    cfg: &ProviderConfig,
    out: impl AsRef<Path>,
) -> Result<EmbeddingTable> {
    let out = out.as_ref();
    let pending = pending_days(days, cfg, out)?;
    if pending.1.is_empty() {
        return Ok(pending.0);
    }
    let provider = provider_from_config(cfg)?;
    build_embedding_table_with(provider.as_ref(), days, cfg, out)
}

fn pending_days<'a>(
    days: &'a [DocumentDay],
    cfg: &ProviderConfig,
    out: &Path,
) -> Result<(EmbeddingTable, Vec<&'a DocumentDay>)> {
    cfg.validate_sizes()?;
    let table = if out.exists() {
        EmbeddingTable::load(out, Some(cfg.dim))?
    } else {
        EmbeddingTable::new(cfg.dim)
    };
    let pending = days
        .iter()
        .filter(|d| d.has_text() && !table.contains(&d.symbol, d.date))
        .collect();
    Ok((table, pending))
}

/// Embeds every day with text that `out` does not hold yet, mean-pooling
/// the texts of a day, and appends each finished group of days to `out`.
/// A failure leaves everything written so far in place, so a rerun resumes.
pub fn build_embedding_table_with(
    provider: &dyn EmbeddingProvider,
    days: &[DocumentDay],
    cfg: &ProviderConfig,
    out: impl AsRef<Path>,
) -> Result<EmbeddingTable> {
    let out = out.as_ref();
    let (mut table, pending) = pending_days(days, cfg, out)?;
    if pending.is_empty() {
        return Ok(table);
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MsgcaError::io(dir, e))?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(|e| MsgcaError::io(out, e))?;
    let group_texts = cfg.max_batch * cfg.max_parallel;
    let mut start = 0;
    while start < pending.len() {
        let mut end = start;
        let mut texts: Vec<String> = Vec::new();
        while end < pending.len() && (texts.is_empty() || texts.len() < group_texts) {
            texts.extend(pending[end].nonempty_texts().map(str::to_string));
            end += 1;
        }
        let vectors = embed_with(provider, &texts, cfg)?;
        let mut offset = 0;
        for day in &pending[start..end] {
            let n = day.nonempty_texts().count();
            let mut mean = vec![0.0; cfg.dim];
            for v in &vectors[offset..offset + n] {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            offset += n;
            write_embedding_line(&mut file, &day.symbol, day.date, &mean)?;
            table.insert(&day.symbol, day.date, mean)?;
        }
        file.flush().map_err(|e| MsgcaError::io(out, e))?;
        log::info!("embedded {end}/{} pending days", pending.len());
        start = end;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        calls: AtomicUsize,
        dim: usize,
    }

    impl EmbeddingProvider for Counting {
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(texts
                .iter()
                .map(|t| (0..self.dim).map(|j| (t.len() * (j + 1)) as f64).collect())
                .collect())
        }
    }

    fn cfg(dim: usize) -> ProviderConfig {
        ProviderConfig {
            dim,
            max_batch: 2,
            max_parallel: 2,
            ..ProviderConfig::default()
        }
    }

    fn day(sym: &str, d: u32, texts: &[&str]) -> DocumentDay {
        DocumentDay {
            symbol: sym.into(),
            date: NaiveDate::from_ymd_opt(2023, 1, d).unwrap(),
            texts: texts.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn blank_text_rejected() {
        assert!(EmbedRequest::new(vec!["a".into(), "  ".into()], "m").is_err());
        assert!(EmbedRequest::new(vec![], "m").is_err());
    }

    #[test]
    fn file_backend_hit_and_miss() {
        let p = FileProvider::from_map(HashMap::from([("hi".to_string(), vec![1.0, 2.0])]));
        assert_eq!(p.embed_batch(&["hi".into()]).unwrap(), vec![vec![1.0, 2.0]]);
        assert!(matches!(
            p.embed_batch(&["nope".into()]),
            Err(MsgcaError::MissingEmbedding(_))
        ));
    }

    #[test]
    fn wrong_width_is_a_contract_error() {
        let p = Counting {
            calls: AtomicUsize::new(0),
            dim: 3,
        };
        let err = embed_with(&p, &["x".into()], &cfg(4)).unwrap_err();
        assert!(matches!(
            err,
            MsgcaError::Contract {
                expected: 4,
                actual: 3
            }
        ));
    }

    #[test]
    fn table_mean_pools_and_reruns_without_calls() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("embeddings.jsonl");
        let p = Counting {
            calls: AtomicUsize::new(0),
            dim: 2,
        };
        let days = vec![
            day("A", 2, &["ab", "abcd"]),
            day("B", 2, &[]),
            day("B", 3, &["x"]),
        ];
        let t = build_embedding_table_with(&p, &days, &cfg(2), &out).unwrap();
        assert_eq!(t.len(), 2);
        let a = t.get("A", days[0].date).unwrap();
        assert_eq!(a, &[3.0, 6.0]);
        let before = p.calls.load(Ordering::SeqCst);
        assert!(before > 0);
        let again = build_embedding_table_with(&p, &days, &cfg(2), &out).unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), before);
        assert_eq!(again.len(), 2);
        assert_eq!(EmbeddingTable::load(&out, Some(2)).unwrap().len(), 2);
    }

    #[test]
    fn empty_days_give_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = Counting {
            calls: AtomicUsize::new(0),
            dim: 2,
        };
        let t = build_embedding_table_with(&p, &[], &cfg(2), dir.path().join("e.jsonl")).unwrap();
        assert!(t.is_empty());
        assert_eq!(p.calls.load(Ordering::SeqCst), 0);
    }
}
