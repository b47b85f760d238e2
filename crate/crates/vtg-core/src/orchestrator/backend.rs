//! Role backends: the pluggable model interface behind the pipeline.
//!
//! `MockBackend` produces deterministic pseudo-random outputs for batch
//! smoke runs, `ScriptedBackend` replays fixed responses for golden tests,
//! and `HttpBackend` talks to per-role model endpoints over JSON POST.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Moment, VideoMeta};
use crate::verifier::SegmentLayout;

use super::prompts::{render_prompt, PromptSlots};
use crate::types::Role;

/// One model behind the four roles. Implementations must be deterministic
/// for a fixed seed so pipeline traces can be frozen.
pub trait RoleBackend: Sync {
    /// Raw planner output: a JSON list of role calls.
    fn plan(&self, video: &VideoMeta, question: &str) -> Result<String>;

    /// Scored candidate moments for a grounding query.
    fn ground(&self, video: &VideoMeta, query: &str) -> Result<Vec<Moment>>;

    /// Log-likelihoods of the boolean verdict tokens for one zoomed segment.
    fn verify(
        &self,
        video: &VideoMeta,
        candidate_index: usize,
        segment: &Moment,
        layout: &SegmentLayout,
        query: &str,
    ) -> Result<(f64, f64)>;

    /// Free-form answer over the whole video or a cropped segment.
    fn answer(
        &self,
        video: &VideoMeta,
        segment: Option<&Moment>,
        question: &str,
        options: Option<&[String]>,
        subtitles: Option<&str>,
    ) -> Result<String>;
}

fn hash_u64(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic stand-in model: every response is a pure function of the
/// seed and the call inputs.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub seed: u64,
    /// Candidates returned per grounding call.
    pub candidates_per_query: usize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            candidates_per_query: 5,
        }
    }

    fn rng_for(&self, parts: &[&str]) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mixed = hash_u64(parts) ^ self.seed.rotate_left(17);
        rand_chacha::ChaCha8Rng::seed_from_u64(mixed)
    }
}

impl RoleBackend for MockBackend {
    fn plan(&self, video: &VideoMeta, question: &str) -> Result<String> {
        // mirror the intended routing: very short videos skip grounding,
        // questions go through the full plan, plain queries ground only
        let plan = if video.duration < 10.0 {
            r#"[{"type":"answerer"}]"#.to_string()
        } else if question.trim_end().ends_with('?') {
            format!(
                r#"[{{"type":"grounder","value":{}}},{{"type":"verifier"}},{{"type":"answerer"}}]"#,
                serde_json::to_string(question)?
            )
        } else {
            format!(
                r#"[{{"type":"grounder","value":{}}},{{"type":"verifier"}}]"#,
                serde_json::to_string(question)?
            )
        };
        Ok(plan)
    }

    fn ground(&self, video: &VideoMeta, query: &str) -> Result<Vec<Moment>> {
        use rand::Rng;
        let mut rng = self.rng_for(&["ground", &video.video_id, query]);
        let dur = video.duration;
        let mut cands = Vec::with_capacity(self.candidates_per_query);
        for _ in 0..self.candidates_per_query {
            let len = rng.random_range(0.08..0.4) * dur;
            let start = rng.random_range(0.0..(dur - len));
            let score = rng.random_range(0.05..0.95);
            cands.push(Moment {
                start,
                end: start + len,
                score: Some(score),
            });
        }
        Ok(cands)
    }

    fn verify(
        &self,
        video: &VideoMeta,
        candidate_index: usize,
        segment: &Moment,
        _layout: &SegmentLayout,
        query: &str,
    ) -> Result<(f64, f64)> {
        use rand::Rng;
        let key = format!(
            "{}:{}:{:.6}:{:.6}",
            candidate_index, query, segment.start, segment.end
        );
        let mut rng = self.rng_for(&["verify", &video.video_id, &key]);
        Ok((rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
    }

    fn answer(
        &self,
        video: &VideoMeta,
        segment: Option<&Moment>,
        question: &str,
        options: Option<&[String]>,
        _subtitles: Option<&str>,
    ) -> Result<String> {
        use rand::Rng;
        let key = match segment {
            Some(s) => format!("{question}:{:.6}:{:.6}", s.start, s.end),
            None => format!("{question}:full"),
        };
        let mut rng = self.rng_for(&["answer", &video.video_id, &key]);
        match options {
            Some(opts) if !opts.is_empty() => {
                let idx = rng.random_range(0..opts.len());
                Ok(format!("({})", (b'A' + idx as u8) as char))
            }
            _ => Ok(format!("mock answer {}", rng.random_range(0..1000))),
        }
    }
}

/// Replays fixed responses; used to freeze golden pipeline traces.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    pub plan_response: String,
    pub candidates: Vec<Moment>,
    /// `(l_yes, l_no)` per candidate index.
    pub verifier_logits: Vec<(f64, f64)>,
    pub answer: String,
}

impl RoleBackend for ScriptedBackend {
    fn plan(&self, _video: &VideoMeta, _question: &str) -> Result<String> {
        Ok(self.plan_response.clone())
    }

    fn ground(&self, _video: &VideoMeta, _query: &str) -> Result<Vec<Moment>> {
        Ok(self.candidates.clone())
    }

    fn verify(
        &self,
        _video: &VideoMeta,
        candidate_index: usize,
        _segment: &Moment,
        _layout: &SegmentLayout,
        _query: &str,
    ) -> Result<(f64, f64)> {
        self.verifier_logits
            .get(candidate_index)
            .copied()
            .ok_or_else(|| {
                Error::Backend(format!(
                    "no scripted logits for candidate {candidate_index}"
                ))
            })
    }

    fn answer(
        &self,
        _video: &VideoMeta,
        _segment: Option<&Moment>,
        _question: &str,
        _options: Option<&[String]>,
        _subtitles: Option<&str>,
    ) -> Result<String> {
        Ok(self.answer.clone())
    }
}

/// Failing backend for error-path tests.
#[derive(Debug, Clone)]
pub struct FailingBackend {
    pub fail_role: Role,
    pub inner: MockBackend,
}

impl RoleBackend for FailingBackend {
    fn plan(&self, video: &VideoMeta, question: &str) -> Result<String> {
        if self.fail_role == Role::Planner {
            return Err(Error::Backend("injected planner failure".into()));
        }
        self.inner.plan(video, question)
    }

    fn ground(&self, video: &VideoMeta, query: &str) -> Result<Vec<Moment>> {
        if self.fail_role == Role::Grounder {
            return Err(Error::Backend("injected grounder failure".into()));
        }
        self.inner.ground(video, query)
    }

    fn verify(
        &self,
        video: &VideoMeta,
        candidate_index: usize,
        segment: &Moment,
        layout: &SegmentLayout,
        query: &str,
    ) -> Result<(f64, f64)> {
        if self.fail_role == Role::Verifier {
            return Err(Error::Backend("injected verifier failure".into()));
        }
        self.inner
            .verify(video, candidate_index, segment, layout, query)
    }

    fn answer(
        &self,
        video: &VideoMeta,
        segment: Option<&Moment>,
        question: &str,
        options: Option<&[String]>,
        subtitles: Option<&str>,
    ) -> Result<String> {
        if self.fail_role == Role::Answerer {
            return Err(Error::Backend("injected answerer failure".into()));
        }
        self.inner
            .answer(video, segment, question, options, subtitles)
    }
}

/// Remote per-role endpoints speaking JSON over HTTP POST.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub planner_url: String,
    pub grounder_url: String,
    pub verifier_url: String,
    pub answerer_url: String,
    /// Environment variable holding the bearer token, if any.
    pub auth_token_env: String,
    pub timeout_secs: u64,
    /// Extra attempts after a transport error (never after model output).
    pub retries: u32,
    /// Passed through verbatim as the `generation` request field.
    pub generation: serde_json::Value,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            planner_url: String::new(),
            grounder_url: String::new(),
            verifier_url: String::new(),
            answerer_url: String::new(),
            auth_token_env: "VTG_BACKEND_TOKEN".to_string(),
            timeout_secs: 30,
            retries: 2,
            generation: serde_json::json!({}),
        }
    }
}

/// Request body sent to every role endpoint.
#[derive(Debug, Serialize)]
struct BackendRequest<'a> {
    role: &'a str,
    prompt: &'a str,
    media: serde_json::Value,
    generation: serde_json::Value,
}

/// Response body expected from role endpoints. `moments` is for the
/// grounder; `token_logprobs` for verifier calls with log-probs enabled.
#[derive(Debug, Deserialize)]
struct BackendResponse {
    #[serde(default)]
    text: String,
    #[serde(default)]
    moments: Option<Vec<(f64, f64, f64)>>,
    #[serde(default)]
    token_logprobs: Option<Vec<TokenLogProb>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogProb {
    token: String,
    logprob: f64,
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(format!("http client: {e}")))?;
        let token = std::env::var(&cfg.auth_token_env)
            .ok()
            .filter(|t| !t.is_empty());
        Ok(HttpBackend { cfg, client, token })
    }

    fn post(&self, url: &str, body: &BackendRequest) -> Result<BackendResponse> {
        if url.is_empty() {
            return Err(Error::Backend(format!(
                "no endpoint configured for role {}",
                body.role
            )));
        }
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(url).json(body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if !status.is_success() {
                        let text = resp.text().unwrap_or_default();
                        return Err(Error::Backend(format!(
                            "{url} returned {status}: {}",
                            text.chars().take(200).collect::<String>()
                        )));
                    }
                    return resp
                        .json::<BackendResponse>()
                        .map_err(|e| Error::Backend(format!("{url} bad response body: {e}")));
                }
                Err(e) => {
                    let transport = e.is_timeout() || e.is_connect() || e.is_request();
                    if transport && attempt < self.cfg.retries {
                        attempt += 1;
                        std::thread::sleep(Duration::from_millis(100 * attempt as u64));
                        continue;
                    }
                    return Err(Error::Backend(format!("{url}: {e}")));
                }
            }
        }
    }

    fn media(video: &VideoMeta, segment: Option<&Moment>) -> serde_json::Value {
        let mut media = serde_json::json!({
            "video_id": video.video_id,
            "duration": video.duration,
        });
        if let Some(seg) = segment {
            media["segment"] = serde_json::json!([seg.start, seg.end]);
        }
        media
    }
}

impl RoleBackend for HttpBackend {
    fn plan(&self, video: &VideoMeta, question: &str) -> Result<String> {
        let slots = PromptSlots {
            question: Some(question),
            ..Default::default()
        };
        let prompt = render_prompt(Role::Planner, &slots)?;
        let body = BackendRequest {
            role: "planner",
            prompt: &prompt,
            media: Self::media(video, None),
            generation: self.cfg.generation.clone(),
        };
        Ok(self.post(&self.cfg.planner_url, &body)?.text)
    }

    fn ground(&self, video: &VideoMeta, query: &str) -> Result<Vec<Moment>> {
        let slots = PromptSlots {
            query: Some(query),
            ..Default::default()
        };
        let prompt = render_prompt(Role::Grounder, &slots)?;
        let body = BackendRequest {
            role: "grounder",
            prompt: &prompt,
            media: Self::media(video, None),
            generation: self.cfg.generation.clone(),
        };
        let resp = self.post(&self.cfg.grounder_url, &body)?;
        let triples = resp
            .moments
            .ok_or_else(|| Error::Backend("grounder response missing `moments`".into()))?;
        triples
            .into_iter()
            .map(|(s, e, score)| Moment::with_score(s, e, score.clamp(0.0, 1.0)))
            .collect()
    }

    fn verify(
        &self,
        video: &VideoMeta,
        _candidate_index: usize,
        segment: &Moment,
        _layout: &SegmentLayout,
        query: &str,
    ) -> Result<(f64, f64)> {
        let slots = PromptSlots {
            query: Some(query),
            ..Default::default()
        };
        let prompt = render_prompt(Role::Verifier, &slots)?;
        let mut generation = self.cfg.generation.clone();
        generation["return_logprobs"] = serde_json::json!(true);
        let body = BackendRequest {
            role: "verifier",
            prompt: &prompt,
            media: Self::media(video, Some(segment)),
            generation,
        };
        let resp = self.post(&self.cfg.verifier_url, &body)?;
        if let Some(lps) = &resp.token_logprobs {
            let find = |needle: &str| {
                lps.iter()
                    .find(|lp| lp.token.trim() == needle)
                    .map(|lp| lp.logprob)
            };
            if let (Some(l_yes), Some(l_no)) = (find("Yes"), find("No")) {
                return Ok((l_yes, l_no));
            }
        }
        // logprob-free server: map the generated text onto fixed confidences
        let text = resp.text.trim();
        let verdict_yes = text.starts_with("Yes") || text.starts_with("yes");
        eprintln!(
            "verifier endpoint returned no Yes/No log-probabilities; using text verdict ({})",
            if verdict_yes {
                "Yes -> 0.99"
            } else {
                "No -> 0.01"
            }
        );
        let logit = (0.99f64 / 0.01).ln();
        Ok(if verdict_yes {
            (logit, 0.0)
        } else {
            (0.0, logit)
        })
    }

    fn answer(
        &self,
        video: &VideoMeta,
        segment: Option<&Moment>,
        question: &str,
        options: Option<&[String]>,
        subtitles: Option<&str>,
    ) -> Result<String> {
        let slots = PromptSlots {
            question: Some(question),
            duration: Some(segment.map(|s| s.len()).unwrap_or(video.duration)),
            options,
            subtitles,
            ..Default::default()
        };
        let prompt = render_prompt(Role::Answerer, &slots)?;
        let body = BackendRequest {
            role: "answerer",
            prompt: &prompt,
            media: Self::media(video, segment),
            generation: self.cfg.generation.clone(),
        };
        Ok(self.post(&self.cfg.answerer_url, &body)?.text)
    }
}
