//! Two-step extraction through a remote language model: step 1 lists every
//! finding verbatim, step 2 labels each one key or normal.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ExtractionBackend;
use crate::error::{Error, Result};
use crate::preprocess::tokenize;
use crate::types::{AnnotationSet, Category, Consultation, Mention, Span, Token};

pub const ENDPOINT_VAR: &str = "PHENOPIPE_LLM_ENDPOINT";
pub const API_KEY_VAR: &str = "PHENOPIPE_LLM_API_KEY";

const EXTRACT_TEMPLATE: &str = include_str!("../../prompts/extract_v1.txt");
const CLASSIFY_TEMPLATE: &str = include_str!("../../prompts/classify_v1.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub text: String,
    pub step: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<String>>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmItem {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub items: Vec<LlmItem>,
}

impl LlmResponse {
    /// Parses a raw response body; failures keep the payload for diagnosis.
    pub fn parse(raw: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::Protocol {
            message: format!("response is not an item list: {e}"),
            payload: raw.to_string(),
        })
    }
}

/// Transport for [`LlmRequest`]s. Must tolerate concurrent calls.
pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse>;
}

fn render(template: &str, text: &str, items: Option<&[String]>) -> String {
    let body = template.split_once('\n').map_or(template, |(_, rest)| rest);
    let listed = items
        .unwrap_or_default()
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    body.replace("{text}", text).replace("{items}", &listed)
}

pub fn extract_request(text: &str) -> LlmRequest {
    LlmRequest {
        text: text.to_string(),
        step: 1,
        items: None,
        prompt: render(EXTRACT_TEMPLATE, text, None),
    }
}

pub fn classify_request(text: &str, items: &[String]) -> LlmRequest {
    LlmRequest {
        text: text.to_string(),
        step: 2,
        items: Some(items.to_vec()),
        prompt: render(CLASSIFY_TEMPLATE, text, Some(items)),
    }
}

struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            free: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// JSON-over-HTTP client with bounded in-flight requests and a JSONL audit log.
pub struct HttpLlmClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
    audit: Option<Mutex<File>>,
}

impl HttpLlmClient {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpLlmClient {
            endpoint: endpoint.into(),
            api_key,
            agent,
            gate: Gate::new(max_in_flight),
            audit: None,
        }
    }

    /// Endpoint and key from `PHENOPIPE_LLM_ENDPOINT` / `PHENOPIPE_LLM_API_KEY`.
    pub fn from_env(max_in_flight: usize, timeout: Duration) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| Error::Backend(format!("{ENDPOINT_VAR} is not set")))?;
        let key = std::env::var(API_KEY_VAR).ok();
        Ok(Self::new(endpoint, key, max_in_flight, timeout))
    }

    /// Appends every request/response pair to `path`.
    pub fn with_audit_log(mut self, path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.audit = Some(Mutex::new(file));
        Ok(self)
    }

    fn log(&self, request: &LlmRequest, status: Option<u16>, body: &str) {
        let Some(audit) = &self.audit else { return };
        let line = serde_json::json!({
            "endpoint": self.endpoint,
            "request": request,
            "status": status,
            "response": body,
        });
        let mut f = audit.lock().expect("audit log poisoned");
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("audit log write failed: {e}");
        }
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let _permit = self.gate.acquire();
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = match call.send_json(request) {
            Ok(r) => r,
            Err(e) => {
                self.log(request, None, &e.to_string());
                return Err(Error::Backend(format!(
                    "request to {} failed: {e}",
                    self.endpoint
                )));
            }
        };
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("reading response failed: {e}")))?;
        self.log(request, Some(status), &body);
        if !(200..300).contains(&status) {
            return Err(Error::Backend(format!(
                "{} answered HTTP {status}: {body}",
                self.endpoint
            )));
        }
        LlmResponse::parse(&body)
    }
}

fn parse_category(raw: &str) -> Option<Category> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "key" | "key_finding" | "key finding" => Some(Category::KeyFinding),
        "normal" | "normal_finding" | "normal finding" => Some(Category::NormalFinding),
        _ => None,
    }
}

fn lowered(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.surface.to_lowercase()).collect()
}

/// Fragments covering `picked` token indices, merging consecutive runs.
fn runs(tokens: &[Token], picked: &[usize]) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    let mut prev: Option<usize> = None;
    for &i in picked {
        match (prev, out.last_mut()) {
            (Some(p), Some(last)) if p + 1 == i => last.end = tokens[i].end,
            _ => out.push(Span::new(tokens[i].start, tokens[i].end)),
        }
        prev = Some(i);
    }
    out
}

/// Locates `item` in the consultation: leftmost unused contiguous token match,
/// else leftmost unused in-order token subsequence within one sentence.
pub fn locate(consultation: &Consultation, item: &str, used: &[Vec<Span>]) -> Option<Vec<Span>> {
    let want = lowered(&tokenize(item, 0));
    if want.is_empty() {
        return None;
    }
    let fresh = |f: &Vec<Span>| !used.contains(f);
    for sentence in &consultation.sentences {
        let have = lowered(&sentence.tokens);
        for start in 0..have.len() {
            if have[start..].starts_with(&want) {
                let picked: Vec<usize> = (start..start + want.len()).collect();
                let frags = runs(&sentence.tokens, &picked);
                if fresh(&frags) {
                    return Some(frags);
                }
            }
        }
    }
    for sentence in &consultation.sentences {
        let have = lowered(&sentence.tokens);
        for start in 0..have.len() {
            if have[start] != want[0] {
                continue;
            }
            let mut picked = vec![start];
            let mut k = 1;
            for (i, surface) in have.iter().enumerate().skip(start + 1) {
                if k == want.len() {
                    break;
                }
                if *surface == want[k] {
                    picked.push(i);
                    k += 1;
                }
            }
            if k == want.len() {
                let frags = runs(&sentence.tokens, &picked);
                if fresh(&frags) {
                    return Some(frags);
                }
            }
        }
    }
    None
}

/// Extraction backend driving an [`LlmClient`] through both steps.
pub struct LlmBackend<C: LlmClient> {
    client: C,
}

impl<C: LlmClient> LlmBackend<C> {
    pub fn new(client: C) -> Self {
        LlmBackend { client }
    }
}

impl<C: LlmClient> ExtractionBackend for LlmBackend<C> {
    fn name(&self) -> &str {
        "llm"
    }

    fn extract(&self, consultation: &Consultation) -> Result<AnnotationSet> {
        let text = &consultation.text;
        let mut out = AnnotationSet::new(consultation.id.clone());
        let found = self.client.complete(&extract_request(text))?;
        let items: Vec<String> = found.items.into_iter().map(|i| i.text).collect();
        if items.is_empty() {
            return Ok(out);
        }
        let labelled = self.client.complete(&classify_request(text, &items))?;
        if labelled.items.len() != items.len() {
            return Err(Error::Protocol {
                message: format!(
                    "classification returned {} items for {} findings",
                    labelled.items.len(),
                    items.len()
                ),
                payload: serde_json::to_string(&labelled)?,
            });
        }
        let mut used: Vec<Vec<Span>> = Vec::new();
        for (item, label) in items.iter().zip(&labelled.items) {
            let raw = label.category.as_deref().unwrap_or("");
            let Some(category) = parse_category(raw) else {
                return Err(Error::Protocol {
                    message: format!("unknown category {raw:?} for {item:?}"),
                    payload: serde_json::to_string(&labelled)?,
                });
            };
            let Some(frags) = locate(consultation, item, &used) else {
                log::warn!("{}: dropping {item:?}, not found in text", consultation.id);
                continue;
            };
            used.push(frags.clone());
            out.push_unique(Mention::new(frags, category, None)?);
        }
        out.sort();
        Ok(out)
    }
}
