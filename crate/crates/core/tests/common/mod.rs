#![allow(dead_code)]

use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use hallu_probe::chat::{ChatClient, ChatError, ChatRequest, FnClient};
use hallu_probe::harvest::{ArticleSnapshot, Reference, Section};
use hallu_probe::pipeline::{ClientFactory, EndpointConfig};
use hallu_probe::probe::Samples;
use hallu_probe::prompts::RagPrompt;
use hallu_probe::states::{self, Quantization, ResponseRecord, StateKind, StatesWriter};

pub fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

const PLACES: [&str; 6] = ["Lisbon", "Tallinn", "Osaka", "Valparaiso", "Nairobi", "Winnipeg"];
const THINGS: [&str; 5] = ["charging stations", "bicycle lanes", "heat pumps", "rain gardens", "tram stops"];

/// `n` recent articles, each with a context paragraph and one cited sentence
/// that passes every filter.
pub fn recent_articles(n: usize) -> Vec<ArticleSnapshot> {
    (0..n)
        .map(|i| {
            let place = PLACES[i % PLACES.len()];
            let thing = THINGS[(i / PLACES.len()) % THINGS.len()];
            let count = 100 + 7 * i;
            ArticleSnapshot {
                article_id: format!("a{i:04}"),
                title: format!("Urban programme {i} in {place}"),
                created_at: date("2024-03-01"),
                sections: vec![Section {
                    heading: "Overview".into(),
                    paragraphs: vec![
                        format!("The programme number {i} was announced by the city council of {place} after a long consultation with residents and local businesses."),
                        format!("During its first year the city of {place} installed {count} new {thing} across the districts named in the plan.<ref name=\"r{i}\"/>"),
                    ],
                }],
                references: vec![Reference { ref_id: format!("r{i}"), date: Some(date("2024-02-10")), access_date: Some(date("2024-02-20")), archive_date: None }],
            }
        })
        .collect()
}

pub fn write_articles(path: &Path, articles: &[ArticleSnapshot]) {
    hallu_probe::jsonl::write(path, articles).unwrap();
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let a = text.find(start)? + start.len();
    let b = text[a..].find(end).map_or(text.len(), |o| a + o);
    Some(text[a..b].trim())
}

fn hash_byte(text: &str) -> u8 {
    Sha256::digest(text.as_bytes())[0]
}

/// Answers generator prompts with a quote taken from the sentence and judge
/// prompts with a verdict derived from a hash of the judged sentence.
pub fn fake_reply(request: &ChatRequest) -> Result<String, ChatError> {
    let user = &request.messages.last().expect("user message").content;
    if let Some(sentence) = between(user, "### SENTENCE TO JUDGE", "\n\n") {
        let h = hash_byte(sentence);
        let bits = if h < 13 {
            (true, true, true, true)
        } else if h < 100 {
            (true, false, true, false)
        } else {
            (false, true, false, false)
        };
        return Ok(format!(
            "The sentence was compared with the passage.\n```json\n{{\"conflicting\": {}, \"grounded\": {}, \"has_factual_information\": {}, \"no_clear_answer\": {}}}\n```",
            bits.0, bits.1, bits.2, bits.3
        ));
    }
    if let Some(sentence) = between(user, "### SENTENCE", "\n\n### OBJECTIVE") {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let at = words.iter().position(|w| w.chars().all(|c| c.is_ascii_digit())).unwrap_or(0);
        let quote = words[at..(at + 3).min(words.len())].join(" ");
        return Ok(serde_json::json!({"answer_quote": quote, "question": format!("How many were installed in the plan {at}?")}).to_string());
    }
    Err(ChatError::Protocol("unrecognised prompt".into()))
}

pub struct FakeEndpoint;

impl ClientFactory for FakeEndpoint {
    fn client(&self, _: &EndpointConfig) -> Result<Box<dyn ChatClient>, String> {
        Ok(Box::new(FnClient(fake_reply)))
    }
}

/// Fails the test if a networked stage asks for a client.
pub struct NoNetwork;

impl ClientFactory for NoNetwork {
    fn client(&self, _: &EndpointConfig) -> Result<Box<dyn ChatClient>, String> {
        panic!("a chat client was requested")
    }
}

/// Stands in for the external capture tool: two response sentences per
/// prompt and pseudo-random state vectors.
pub fn capture(prompts: &[RagPrompt], model: &str, quant: Quantization, dim: usize, dir: &Path) {
    let mut responses = Vec::new();
    let mut writer = StatesWriter::new(model, quant, &[(StateKind::CevMiddle, dim), (StateKind::IavLast, dim)]).with_blocks(8);
    for p in prompts {
        let text = format!(
            "According to the context, the answer concerns {}. The figure for {} comes from the first year of the plan.",
            p.answer_quote, p.question_id
        );
        let r = ResponseRecord::new(&p.prompt_id, model, quant, &text);
        let mut rng = ChaCha8Rng::from_seed(Sha256::digest(format!("{model}/{quant}/{}", p.prompt_id).as_bytes()).into());
        for s in &r.sentences {
            let a: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            writer.push(&p.prompt_id, s.index, &[&a, &b]).unwrap();
        }
        responses.push(r);
    }
    writer.write(dir).unwrap();
    hallu_probe::jsonl::write(&dir.join(states::RESPONSES_FILE), &responses).unwrap();
}

/// Two unit-variance Gaussian clusters whose means are `distance` apart,
/// with equal class sizes in shuffled order.
pub fn gaussian_clusters(n: usize, dim: usize, distance: f64, rng: &mut ChaCha8Rng) -> (Array2<f32>, Array1<f32>) {
    let offset = distance / 2.0 / (dim as f64).sqrt();
    let mut labels: Vec<f32> = (0..n).map(|i| (i % 2) as f32).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let x = Array2::from_shape_fn((n, dim), |(i, _)| {
        let z: f64 = StandardNormal.sample(rng);
        (z + if labels[i] == 1.0 { offset } else { -offset }) as f32
    });
    (x, Array1::from(labels))
}

/// Nearest class mean on the training rows, which is the maximum-margin
/// direction for isotropic clusters, scored on the test rows.
pub fn margin_oracle(train: &Samples, test: &Samples) -> f64 {
    let dim = train.dim();
    let mut means = [vec![0f64; dim], vec![0f64; dim]];
    let mut counts = [0f64; 2];
    for (row, &y) in train.x.outer_iter().zip(&train.y) {
        let c = y as usize;
        counts[c] += 1.0;
        for (m, &v) in means[c].iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|m| *m /= counts[c]);
    }
    let w: Vec<f64> = (0..dim).map(|j| means[1][j] - means[0][j]).collect();
    let b: f64 = (0..dim).map(|j| w[j] * (means[1][j] + means[0][j]) / 2.0).sum();
    let correct = test
        .x
        .outer_iter()
        .zip(&test.y)
        .filter(|(row, &y)| {
            let s: f64 = row.iter().zip(&w).map(|(&v, w)| f64::from(v) * w).sum::<f64>() - b;
            (s >= 0.0) == (y == 1.0)
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Clusters cut 60/20/20 into train, validation and test.
pub fn cluster_split(n: usize, dim: usize, distance: f64, seed: u64) -> (Samples, Samples, Samples) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = gaussian_clusters(n, dim, distance, &mut rng);
    let all = Samples::new(x, y).expect("valid samples");
    let n = all.len();
    let (a, b) = (n * 3 / 5, n * 4 / 5);
    let idx: Vec<usize> = (0..n).collect();
    (all.select(&idx[..a]), all.select(&idx[a..b]), all.select(&idx[b..]))
}
