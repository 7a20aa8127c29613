//! Two-stage explanation client: a raw explanation per source, then a
//! refinement of that raw text. Responses are stored as text sidecars and the
//! manifest records each record's progress.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ExplanationState, Manifest};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token for [`HttpProvider`].
pub const TOKEN_ENV: &str = "SENTIMOE_PROVIDER_TOKEN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Refine,
}

/// What an explanation describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Audio,
    Video,
    Comments,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Audio, Source::Video, Source::Comments];

    pub fn name(self) -> &'static str {
        match self {
            Source::Audio => "audio",
            Source::Video => "video",
            Source::Comments => "comments",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationRequest {
    pub id: String,
    pub stage: Stage,
    pub modality: Source,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationResponse {
    pub text: String,
    /// `"ok"` on success.
    pub status: String,
}

pub trait ExplanationProvider {
    fn request(&self, req: &ExplanationRequest) -> Result<ExplanationResponse>;
}

/// Deterministic offline provider: the text is a function of the seed and the request.
#[derive(Clone, Copy, Debug)]
pub struct StubProvider {
    pub seed: u64,
}

const TONES: [&str; 8] = [
    "warm", "flat", "tense", "bright", "hesitant", "steady", "sharp", "soft",
];
const CUES: [&str; 8] = [
    "a rising pitch",
    "a brief smile",
    "lowered eyes",
    "a firm voice",
    "a long pause",
    "raised brows",
    "quick speech",
    "a sigh",
];

impl ExplanationProvider for StubProvider {
    fn request(&self, req: &ExplanationRequest) -> Result<ExplanationResponse> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for part in [req.id.as_str(), req.modality.name(), req.payload.as_str()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update([req.stage as u8]);
        let d = h.finalize();
        let tone = TONES[d[0] as usize % TONES.len()];
        let cue = CUES[d[1] as usize % CUES.len()];
        let tag: String = d[2..6].iter().map(|b| format!("{b:02x}")).collect();
        let text = match req.stage {
            Stage::Raw => format!(
                "The {} of {} is {tone}, with {cue}. [{tag}]",
                req.modality.name(),
                req.id
            ),
            Stage::Refine => format!("Refined: the speaker sounds {tone}; {cue} marks the key moment. [{tag}]"),
        };
        Ok(ExplanationResponse {
            text,
            status: "ok".into(),
        })
    }
}

/// JSON-over-HTTP provider: `POST {base_url}` with an [`ExplanationRequest`] body.
#[derive(Clone, Debug)]
pub struct HttpProvider {
    pub base_url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    /// Reads the bearer token from [`TOKEN_ENV`] when it is set.
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(format!("client setup: {e}")))?;
        Ok(Self {
            base_url: base_url.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            client,
        })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }
}

impl ExplanationProvider for HttpProvider {
    fn request(&self, req: &ExplanationRequest) -> Result<ExplanationResponse> {
        let mut call = self.client.post(&self.base_url).json(req);
        if let Some(t) = &self.token {
            call = call.bearer_auth(t);
        }
        let resp = call
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Provider(format!("transport: {e}")))?;
        resp.json::<ExplanationResponse>()
            .map_err(|e| Error::Provider(format!("bad response body: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `n` (1-based): `base · 2^(n-1)`.
    pub fn delay(&self, n: u32) -> Duration {
        self.base_delay.saturating_mul(1 << (n - 1).min(16))
    }
}

/// Calls the provider until it answers with status `"ok"` or the attempts run out.
pub fn request_with_retry(
    provider: &dyn ExplanationProvider,
    req: &ExplanationRequest,
    policy: &RetryPolicy,
) -> Result<ExplanationResponse> {
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for n in 1..=attempts {
        let err = match provider.request(req) {
            Ok(r) if r.status == "ok" => return Ok(r),
            Ok(r) => Error::Provider(format!("status `{}`", r.status)),
            Err(e) => e,
        };
        log::warn!(
            "{} {:?}/{:?} attempt {n}/{attempts}: {err}",
            req.id,
            req.modality,
            req.stage
        );
        last = Some(err);
        if n < attempts {
            std::thread::sleep(policy.delay(n));
        }
    }
    let err = last.expect("at least one attempt");
    Err(Error::Provider(format!("{} attempts failed, last: {err}", attempts)))
}

/// Enforces raw-before-refine per record and source.
pub struct Session<'p> {
    provider: &'p dyn ExplanationProvider,
    policy: RetryPolicy,
    raw: HashMap<(String, Source), String>,
}

impl<'p> Session<'p> {
    pub fn new(provider: &'p dyn ExplanationProvider, policy: RetryPolicy) -> Self {
        Self {
            provider,
            policy,
            raw: HashMap::new(),
        }
    }

    pub fn raw(&mut self, id: &str, source: Source, prompt: &str) -> Result<String> {
        let req = ExplanationRequest {
            id: id.into(),
            stage: Stage::Raw,
            modality: source,
            payload: prompt.into(),
        };
        let text = request_with_retry(self.provider, &req, &self.policy)?.text;
        self.raw.insert((id.to_string(), source), text.clone());
        Ok(text)
    }

    pub fn refine(&mut self, id: &str, source: Source) -> Result<String> {
        let raw = self.raw.get(&(id.to_string(), source)).ok_or_else(|| {
            Error::Contract(format!("refine requested for `{id}` {} before its raw stage", source.name()))
        })?;
        let req = ExplanationRequest {
            id: id.into(),
            stage: Stage::Refine,
            modality: source,
            payload: raw.clone(),
        };
        Ok(request_with_retry(self.provider, &req, &self.policy)?.text)
    }
}

/// Prompt sent with the raw stage.
pub fn raw_prompt(id: &str, source: Source) -> String {
    match source {
        Source::Audio => format!("Explain the sentiment conveyed by the audio of clip {id}."),
        Source::Video => format!("Explain the sentiment conveyed by the facial expressions in clip {id}."),
        Source::Comments => format!("Comment on the overall sentiment of clip {id}."),
    }
}

pub fn sidecar_path(dir: &Path, id: &str, source: Source, stage: Stage) -> PathBuf {
    let stage = match stage {
        Stage::Raw => "raw",
        Stage::Refine => "refined",
    };
    dir.join(format!("{id}.{}.{stage}.txt", source.name()))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchSummary {
    pub completed: Vec<String>,
    pub failed: Vec<String>,
    pub skipped: Vec<String>,
}

fn write_sidecar(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::at_path(path))
}

fn fetch_record(session: &mut Session<'_>, dir: &Path, id: &str, trail: &mut Vec<ExplanationState>) -> Result<()> {
    for source in Source::ALL {
        let text = session.raw(id, source, &raw_prompt(id, source))?;
        write_sidecar(&sidecar_path(dir, id, source, Stage::Raw), &text)?;
    }
    trail.push(ExplanationState::Raw);
    for source in Source::ALL {
        let text = session.refine(id, source)?;
        write_sidecar(&sidecar_path(dir, id, source, Stage::Refine), &text)?;
    }
    trail.push(ExplanationState::Refined);
    Ok(())
}

/// Fetches explanations for every record that lacks embedded ones, writing
/// sidecars under `sidecar_dir`. Records end as `pending-embedding` or `failed`.
pub fn fetch_explanations(
    provider: &dyn ExplanationProvider,
    manifest: &mut Manifest,
    sidecar_dir: &Path,
    policy: RetryPolicy,
) -> Result<FetchSummary> {
    fs::create_dir_all(sidecar_dir).map_err(Error::at_path(sidecar_dir))?;
    let mut session = Session::new(provider, policy);
    let mut summary = FetchSummary::default();
    for entry in &mut manifest.records {
        if matches!(
            entry.explanations,
            ExplanationState::Embedded | ExplanationState::PendingEmbedding
        ) {
            summary.skipped.push(entry.id.clone());
            continue;
        }
        let mut trail = Vec::with_capacity(3);
        match fetch_record(&mut session, sidecar_dir, &entry.id, &mut trail) {
            Ok(()) => {
                trail.push(ExplanationState::PendingEmbedding);
                entry.explanations = ExplanationState::PendingEmbedding;
                entry.explanation_error = None;
                summary.completed.push(entry.id.clone());
            }
            Err(e) => {
                log::warn!("explanations for `{}` failed: {e}", entry.id);
                trail.push(ExplanationState::Failed);
                entry.explanations = ExplanationState::Failed;
                entry.explanation_error = Some(e.to_string());
                summary.failed.push(entry.id.clone());
            }
        }
        entry.explanation_trail = trail;
    }
    Ok(summary)
}
