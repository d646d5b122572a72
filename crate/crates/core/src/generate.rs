//! Generator context assembly and the generator backends.
//!
//! The generator sees `query QUERY_SEP relevant CODE_SEP`, where `relevant`
//! is exactly `W` tokens: the head of the relevant code, padded with PAD when
//! short. Backends are black boxes returning text.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{lex_terms, Specials, TokenId, Tokenizer};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("window {window} does not fit: block {block} minus query {query} minus 2 separators")]
    WindowTooLarge { window: usize, block: usize, query: usize },
    #[error("generator transport failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("generator protocol error: {0}")]
    Protocol(String),
    #[error("cannot render prompt: {0}")]
    Render(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorContext {
    pub query: Vec<TokenId>,
    /// Exactly `window` tokens.
    pub relevant: Vec<TokenId>,
    pub prompt: Vec<TokenId>,
}

/// Crop or pad `relevant` to `window` and lay out the prompt.
pub fn assemble_generator_input(
    query: &[TokenId],
    relevant: &[TokenId],
    window: usize,
    block_size: usize,
) -> Result<GeneratorContext, GenerateError> {
    if query.len() + 2 > block_size || window > block_size - query.len() - 2 {
        return Err(GenerateError::WindowTooLarge {
            window,
            block: block_size,
            query: query.len(),
        });
    }
    let mut rel: Vec<TokenId> = relevant.iter().copied().take(window).collect();
    rel.resize(window, Specials::PAD);
    let mut prompt = query.to_vec();
    prompt.push(Specials::QUERY_SEP);
    prompt.extend_from_slice(&rel);
    prompt.push(Specials::CODE_SEP);
    Ok(GeneratorContext {
        query: query.to_vec(),
        relevant: rel,
        prompt,
    })
}

/// Everything a backend may use for one call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub context: GeneratorContext,
    /// The rendered prompt, special tokens shown as markers.
    pub prompt: String,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
}

impl GenerationRequest {
    pub fn new(
        context: GeneratorContext,
        tokenizer: &Tokenizer,
        max_new_tokens: usize,
        stop: Vec<String>,
        temperature: f64,
    ) -> Result<Self, GenerateError> {
        let prompt = tokenizer
            .detokenize(&context.prompt)
            .map_err(|e| GenerateError::Render(e.to_string()))?;
        Ok(GenerationRequest {
            context,
            prompt,
            max_new_tokens,
            stop,
            temperature,
        })
    }
}

/// Cut `text` at the earliest stop sequence.
pub fn trim_at_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerateError>;
}

fn depad(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| t != Specials::PAD).collect()
}

/// Returns the de-padded relevant code unchanged.
pub struct EchoGenerator {
    tokenizer: Arc<Tokenizer>,
}

impl EchoGenerator {
    pub fn new(tokenizer: Arc<Tokenizer>) -> Self {
        EchoGenerator { tokenizer }
    }
}

impl Generator for EchoGenerator {
    fn name(&self) -> &str {
        "echo"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerateError> {
        let text = self
            .tokenizer
            .detokenize_plain(&depad(&req.context.relevant))
            .map_err(|e| GenerateError::Render(e.to_string()))?;
        Ok(trim_at_stop(&text, &req.stop))
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "for", "and", "or", "is", "are", "be", "by", "with", "from", "given",
    "that", "this", "it", "as", "at", "into", "its", "if", "return", "returns",
];

/// A deterministic rewriter standing in for a trained generator.
///
/// It keeps the first relevant code segment, renames the first called or
/// declared identifier after the query when the code does not mention every
/// query keyword, and drops the last statement when the segment is longer
/// than `quality_threshold` tokens, so long contexts degrade the output.
pub struct TemplateStubGenerator {
    tokenizer: Arc<Tokenizer>,
    quality_threshold: usize,
}

impl TemplateStubGenerator {
    pub fn new(tokenizer: Arc<Tokenizer>, quality_threshold: usize) -> Self {
        TemplateStubGenerator {
            tokenizer,
            quality_threshold,
        }
    }
}

/// Lower-cased query words that carry meaning.
pub fn query_keywords(query: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in lex_terms(query) {
        let t = t.to_lowercase();
        if t.chars().all(|c| c.is_alphanumeric()) && t.chars().any(char::is_alphabetic) && !STOPWORDS.contains(&t.as_str())
            && !out.contains(&t)
        {
            out.push(t);
        }
    }
    out
}

/// `["add", "two", "numbers"]` → `addTwoNumbers`.
pub fn camel_join(words: &[String]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        let mut cs = w.chars();
        if i == 0 {
            s.push_str(w);
        } else if let Some(f) = cs.next() {
            s.extend(f.to_uppercase());
            s.push_str(cs.as_str());
        }
    }
    s
}

/// Lower-cased sub-words of identifiers (`addTwo_numbers` → add, two, numbers).
fn identifier_words(code: &str) -> Vec<String> {
    let mut out = Vec::new();
    for term in lex_terms(code) {
        let mut cur = String::new();
        let mut prev_lower = false;
        for c in term.chars() {
            if c == '_' || !c.is_alphanumeric() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur).to_lowercase());
                }
                prev_lower = false;
                continue;
            }
            if c.is_uppercase() && prev_lower && !cur.is_empty() {
                out.push(std::mem::take(&mut cur).to_lowercase());
            }
            prev_lower = c.is_lowercase() || c.is_ascii_digit();
            cur.push(c);
        }
        if !cur.is_empty() {
            out.push(cur.to_lowercase());
        }
    }
    out
}

fn is_identifier(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_alphabetic() || c == '_') && cs.all(|c| c.is_alphanumeric() || c == '_')
}

/// Rename the identifier right before the first `(` to `name`, everywhere.
fn rename_callee(pieces: &mut [String], name: &str) {
    let Some(open) = pieces.iter().position(|p| p.trim_start() == "(") else { return };
    if open == 0 {
        return;
    }
    let old = pieces[open - 1].trim_start().to_string();
    if !is_identifier(&old) || old == name {
        return;
    }
    for p in pieces.iter_mut() {
        if p.trim_start() == old {
            let lead = &p[..p.len() - p.trim_start().len()];
            *p = format!("{lead}{name}");
        }
    }
}

/// Remove the final statement: up to the last `;`, else the last line,
/// else the second half.
fn drop_last_statement(pieces: &mut Vec<String>) {
    let semis: Vec<usize> = (0..pieces.len()).filter(|&i| pieces[i].trim_start() == ";").collect();
    if let Some(&last) = semis.last() {
        let start = (0..last)
            .rev()
            .find(|&i| matches!(pieces[i].trim_start(), ";" | "{" | "}"))
            .map_or(0, |i| i + 1);
        pieces.drain(start..=last);
        return;
    }
    let lines: Vec<usize> = (0..pieces.len()).filter(|&i| pieces[i] == "\n").collect();
    let content_end = pieces.iter().rposition(|p| p != "\n").map_or(0, |i| i + 1);
    if let Some(&cut) = lines.iter().rev().find(|&&i| i < content_end) {
        pieces.truncate(cut);
        return;
    }
    let half = pieces.len() / 2;
    pieces.truncate(half);
}

impl Generator for TemplateStubGenerator {
    fn name(&self) -> &str {
        "template"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerateError> {
        let render = |ids: &[TokenId]| {
            self.tokenizer
                .detokenize_plain(ids)
                .map_err(|e| GenerateError::Render(e.to_string()))
        };
        let relevant = depad(&req.context.relevant);
        let segment: Vec<TokenId> = relevant
            .iter()
            .copied()
            .take_while(|&t| t != Specials::CODE_SEP && t != Specials::EOS)
            .collect();
        let code = render(&segment)?;
        if code.trim().is_empty() {
            return Ok(String::new());
        }
        let query = render(&req.context.query)?;
        let mut pieces = crate::tokenizer::pieces(&code);
        let keywords = query_keywords(&query);
        let words = identifier_words(&code);
        if !keywords.is_empty() && !keywords.iter().all(|k| words.contains(k)) {
            rename_callee(&mut pieces, &camel_join(&keywords));
        }
        if segment.len() > self.quality_threshold {
            drop_last_statement(&mut pieces);
        }
        Ok(trim_at_stop(pieces.concat().trim(), &req.stop))
    }
}

/// Client for `POST {endpoint}/v1/generate`.
pub struct HttpGenerator {
    url: String,
    agent: ureq::Agent,
    retries: usize,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    stop: &'a [String],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub const ENDPOINT_ENV: &str = "RRG_GENERATOR_URL";

impl HttpGenerator {
    /// `endpoint` is the server base URL; `RRG_GENERATOR_URL` overrides it.
    pub fn new(endpoint: &str, timeout: Duration, retries: usize) -> Self {
        let base = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| endpoint.to_string());
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpGenerator {
            url: format!("{}/v1/generate", base.trim_end_matches('/')),
            agent: config.into(),
            retries,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Generator for HttpGenerator {
    fn name(&self) -> &str {
        "http"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerateError> {
        let body = serde_json::to_string(&WireRequest {
            prompt: &req.prompt,
            max_tokens: req.max_new_tokens,
            stop: &req.stop,
            temperature: req.temperature,
        })
        .expect("request serializes");
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let sent = self
                .agent
                .post(&self.url)
                .header("Content-Type", "application/json")
                .send(body.as_str());
            match sent {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        let text = resp
                            .body_mut()
                            .read_to_string()
                            .map_err(|e| GenerateError::Protocol(e.to_string()))?;
                        let parsed: WireResponse =
                            serde_json::from_str(&text).map_err(|e| GenerateError::Protocol(e.to_string()))?;
                        if parsed.text.is_empty() {
                            log::warn!("generator returned an empty completion");
                        }
                        return Ok(trim_at_stop(&parsed.text, &req.stop));
                    }
                    last = format!("HTTP {status}");
                    if status < 500 {
                        return Err(GenerateError::Transport {
                            attempts: attempt,
                            message: last,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("generator attempt {attempt}/{attempts} failed: {last}");
        }
        Err(GenerateError::Transport { attempts, message: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn tok() -> Arc<Tokenizer> {
        Arc::new(Tokenizer::train(
            [
                "int addTwoNumbers(int a, int b) { int c = a + b; return c; }",
                "add two numbers sum",
                "return a+b",
            ],
            None,
        ))
    }

    fn request(t: &Tokenizer, query: &str, code: &str, window: usize) -> GenerationRequest {
        let ctx = assemble_generator_input(&t.tokenize(query), &t.tokenize(code), window, 512).unwrap();
        GenerationRequest::new(ctx, t, 64, Vec::new(), 0.0).unwrap()
    }

    #[test]
    fn window_crops_and_pads() {
        let q = vec![TokenId(300); 3];
        let long: Vec<TokenId> = (0..126).map(|i| TokenId(400 + i)).collect();
        let ctx = assemble_generator_input(&q, &long, 64, 512).unwrap();
        assert_eq!(ctx.relevant, long[..64]);
        assert_eq!(ctx.prompt.len(), 3 + 1 + 64 + 1);
        let short = vec![TokenId(7); 3];
        let ctx = assemble_generator_input(&q, &short, 6, 512).unwrap();
        assert_eq!(&ctx.relevant[3..], &[Specials::PAD; 3]);
        let ctx = assemble_generator_input(&q, &short, 3, 512).unwrap();
        assert_eq!(ctx.relevant, short);
        assert!(matches!(
            assemble_generator_input(&q, &short, 508, 512),
            Err(GenerateError::WindowTooLarge { .. })
        ));
        assert!(assemble_generator_input(&q, &short, 507, 512).is_ok());
    }

    #[test]
    fn echo_returns_depadded_code() {
        let t = tok();
        let g = EchoGenerator::new(t.clone());
        let r = request(&t, "add", "return a+b", 16);
        assert_eq!(g.generate(&r).unwrap(), "return a+b");
        assert_eq!(g.generate(&r).unwrap(), g.generate(&r).unwrap());
        let r = request(&t, "add", "", 8);
        assert_eq!(g.generate(&r).unwrap(), "");
    }

    #[test]
    fn template_keeps_short_matching_code() {
        let t = tok();
        let g = TemplateStubGenerator::new(t.clone(), 100);
        let code = "int addTwoNumbers(int a, int b) { int c = a + b; return c; }";
        assert_eq!(g.generate(&request(&t, "add two numbers", code, 64)).unwrap(), code);
    }

    #[test]
    fn template_degrades_past_threshold() {
        let t = tok();
        let code = "int addTwoNumbers(int a, int b) { int c = a + b; return c; }";
        let g = TemplateStubGenerator::new(t.clone(), t.tokenize(code).len());
        assert_eq!(g.generate(&request(&t, "add two numbers", code, 64)).unwrap(), code);
        let longer = "int addTwoNumbers(int a, int b) { int c = a + b; c = c + 0; return c; }";
        assert_eq!(
            g.generate(&request(&t, "add two numbers", longer, 64)).unwrap(),
            "int addTwoNumbers(int a, int b) { int c = a + b; c = c + 0; }"
        );
    }

    #[test]
    fn template_renames_to_query() {
        let t = tok();
        let g = TemplateStubGenerator::new(t.clone(), 100);
        let out = g.generate(&request(&t, "add two numbers", "int sum(int a, int b) { return a + b; }", 64)).unwrap();
        assert_eq!(out, "int addTwoNumbers(int a, int b) { return a + b; }");
    }

    #[test]
    fn template_uses_first_segment_only() {
        let t = tok();
        let g = TemplateStubGenerator::new(t.clone(), 100);
        let mut rel = t.tokenize("return a+b");
        rel.push(Specials::CODE_SEP);
        rel.extend(t.tokenize("int c = 1;"));
        let ctx = assemble_generator_input(&t.tokenize("sum"), &rel, 32, 512).unwrap();
        let req = GenerationRequest::new(ctx, &t, 64, Vec::new(), 0.0).unwrap();
        assert_eq!(g.generate(&req).unwrap(), "return a+b");
    }

    #[test]
    fn stop_sequences_trimmed() {
        assert_eq!(trim_at_stop("abc<eos>def", &["<eos>".into(), "c".into()]), "ab");
        assert_eq!(trim_at_stop("abc", &[]), "abc");
    }

    fn serve(responses: Vec<(u16, &'static str)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut s, _) = listener.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn http_round_trip_and_retries() {
        let t = tok();
        let (url, h) = serve(vec![(503, "{}"), (200, r#"{"text":"return a+b<eos>tail"}"#)]);
        let g = HttpGenerator::new(&url, Duration::from_secs(5), 2);
        let mut req = request(&t, "add", "return a+b", 8);
        req.stop = vec!["<eos>".into()];
        assert_eq!(g.generate(&req).unwrap(), "return a+b");
        let bodies = h.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["max_tokens"], 64);
        assert_eq!(sent["stop"][0], "<eos>");
        assert!(sent["prompt"].as_str().unwrap().contains("<query_sep>"));

        let (url, h) = serve(vec![(500, "{}"), (500, "{}"), (500, "{}")]);
        let g = HttpGenerator::new(&url, Duration::from_secs(5), 2);
        let err = g.generate(&req).unwrap_err();
        assert!(matches!(err, GenerateError::Transport { attempts: 3, .. }));
        h.join().unwrap();

        let (url, h) = serve(vec![(200, r#"{"nope":1}"#)]);
        let g = HttpGenerator::new(&url, Duration::from_secs(5), 0);
        assert!(matches!(g.generate(&req), Err(GenerateError::Protocol(_))));
        h.join().unwrap();
    }

    proptest! {
        #[test]
        fn relevant_is_always_window(
            q in prop::collection::vec(262u32..400, 0..20),
            rel in prop::collection::vec(262u32..400, 0..200),
            w in 0usize..300,
        ) {
            let q: Vec<TokenId> = q.into_iter().map(TokenId).collect();
            let rel: Vec<TokenId> = rel.into_iter().map(TokenId).collect();
            let ctx = assemble_generator_input(&q, &rel, w, 512).unwrap();
            prop_assert_eq!(ctx.relevant.len(), w);
            prop_assert!(ctx.prompt.len() <= 512);
        }
    }
}
