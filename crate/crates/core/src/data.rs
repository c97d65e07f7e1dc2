//! Built-in synthetic classification tasks and a plain-text dataset
//! loader. All tasks are sized to train in seconds on one core.
//!
//! File format: one example per line, whitespace-separated integer
//! token ids, a tab, then the integer label. `#` starts a comment line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::SeedStream;

#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Dataset {
    pub fn batch_of(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: indices.iter().map(|&i| self.train[i].tokens.clone()).collect(),
            labels: indices.iter().map(|&i| self.train[i].label).collect(),
        }
    }

    pub fn eval_inputs(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        (
            self.eval.iter().map(|e| e.tokens.clone()).collect(),
            self.eval.iter().map(|e| e.label).collect(),
        )
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["parity", "copy", "patterns"];

pub fn builtin(
    name: &str,
    seq_len: usize,
    train_size: usize,
    eval_size: usize,
    seed: u64,
) -> Result<Dataset> {
    match name {
        "parity" => Ok(parity(seq_len, train_size, eval_size, seed)),
        "copy" => Ok(copy_detection(seq_len, train_size, eval_size, seed)),
        "patterns" => Ok(bag_of_patterns(seq_len, train_size, eval_size, seed)),
        other => Err(Error::InvalidConfig(format!(
            "unknown built-in dataset {other:?} (expected one of {BUILTIN_NAMES:?} or a file path)"
        ))),
    }
}

/// Binary sequences labeled by the parity of their ones count.
///
/// The eval split enumerates every sequence once when `2^seq_len` fits
/// in `eval_size`, so eval accuracy is exact over the input space.
pub fn parity(seq_len: usize, train_size: usize, eval_size: usize, seed: u64) -> Dataset {
    let mut rng = SeedStream::for_purpose(seed, "data-parity");
    let gen = |rng: &mut SeedStream| -> Example {
        let tokens: Vec<usize> = (0..seq_len).map(|_| rng.index(2)).collect();
        let label = tokens.iter().sum::<usize>() % 2;
        Example { tokens, label }
    };
    let train: Vec<Example> = (0..train_size).map(|_| gen(&mut rng)).collect();

    let eval = if seq_len <= 16 && (1usize << seq_len) <= eval_size {
        (0..1usize << seq_len)
            .map(|bits| {
                let tokens: Vec<usize> = (0..seq_len).map(|i| (bits >> i) & 1).collect();
                let label = tokens.iter().sum::<usize>() % 2;
                Example { tokens, label }
            })
            .collect()
    } else {
        (0..eval_size).map(|_| gen(&mut rng)).collect()
    };

    Dataset {
        name: "parity".into(),
        seq_len,
        vocab: 2,
        classes: 2,
        train,
        eval,
    }
}

/// Sequences over a 16-token vocabulary labeled by whether any token
/// occurs more than once. Classes are balanced by construction.
pub fn copy_detection(seq_len: usize, train_size: usize, eval_size: usize, seed: u64) -> Dataset {
    const VOCAB: usize = 16;
    assert!(seq_len <= VOCAB, "copy task needs seq_len <= vocab");
    let mut rng = SeedStream::for_purpose(seed, "data-copy");
    let gen = |rng: &mut SeedStream| -> Example {
        // Draw distinct tokens, then duplicate one for half the examples.
        let mut pool: Vec<usize> = (0..VOCAB).collect();
        rng.shuffle(&mut pool);
        let mut tokens: Vec<usize> = pool[..seq_len].to_vec();
        let label = rng.index(2);
        if label == 1 {
            let src = rng.index(seq_len);
            let mut dst = rng.index(seq_len);
            while dst == src {
                dst = rng.index(seq_len);
            }
            tokens[dst] = tokens[src];
        }
        Example { tokens, label }
    };
    let train = (0..train_size).map(|_| gen(&mut rng)).collect();
    let eval = (0..eval_size).map(|_| gen(&mut rng)).collect();
    Dataset {
        name: "copy".into(),
        seq_len,
        vocab: VOCAB,
        classes: 2,
        train,
        eval,
    }
}

/// Four-way classification: each class owns four marker tokens; a
/// sequence carries markers of its class mixed with shared noise tokens.
pub fn bag_of_patterns(seq_len: usize, train_size: usize, eval_size: usize, seed: u64) -> Dataset {
    const CLASSES: usize = 4;
    const MARKERS_PER_CLASS: usize = 4;
    const NOISE: usize = 8;
    const VOCAB: usize = CLASSES * MARKERS_PER_CLASS + NOISE;
    assert!(seq_len >= 3, "patterns task needs seq_len >= 3");
    let mut rng = SeedStream::for_purpose(seed, "data-patterns");
    let gen = |rng: &mut SeedStream| -> Example {
        let label = rng.index(CLASSES);
        let n_markers = 2 + rng.index(2); // 2 or 3 markers
        let mut tokens = Vec::with_capacity(seq_len);
        for _ in 0..n_markers {
            tokens.push(label * MARKERS_PER_CLASS + rng.index(MARKERS_PER_CLASS));
        }
        while tokens.len() < seq_len {
            tokens.push(CLASSES * MARKERS_PER_CLASS + rng.index(NOISE));
        }
        rng.shuffle(&mut tokens);
        Example { tokens, label }
    };
    let train = (0..train_size).map(|_| gen(&mut rng)).collect();
    let eval = (0..eval_size).map(|_| gen(&mut rng)).collect();
    Dataset {
        name: "patterns".into(),
        seq_len,
        vocab: VOCAB,
        classes: CLASSES,
        train,
        eval,
    }
}

/// Load a delimited text dataset and split off the last `eval_fraction`
/// of lines as the eval set. Every line must have the same sequence
/// length; token and label ranges define vocab and class counts unless
/// larger bounds are supplied.
pub fn load_delimited(path: &Path, eval_fraction: f64) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut examples = Vec::new();
    let mut seq_len = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_display = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (feat, label) = trimmed.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: line_display,
            msg: "expected `<ids><TAB><label>`".into(),
        })?;
        let tokens: Vec<usize> = feat
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: line_display,
                    msg: format!("bad token id {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if tokens.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_display,
                msg: "empty feature list".into(),
            });
        }
        match seq_len {
            None => seq_len = Some(tokens.len()),
            Some(n) if n != tokens.len() => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: line_display,
                    msg: format!("sequence length {} != first line's {}", tokens.len(), n),
                })
            }
            _ => {}
        }
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: line_display,
            msg: format!("bad label {label:?}"),
        })?;
        examples.push(Example { tokens, label });
    }
    if examples.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "no examples".into(),
        });
    }
    let vocab = examples
        .iter()
        .flat_map(|e| e.tokens.iter())
        .max()
        .copied()
        .unwrap()
        + 1;
    let classes = (examples.iter().map(|e| e.label).max().unwrap() + 1).max(2);
    let n_eval = ((examples.len() as f64) * eval_fraction).round() as usize;
    let n_eval = n_eval.clamp(1, examples.len().saturating_sub(1).max(1));
    let split = examples.len() - n_eval;
    let eval = examples.split_off(split);
    Ok(Dataset {
        name: path.display().to_string(),
        seq_len: seq_len.unwrap(),
        vocab,
        classes,
        train: examples,
        eval,
    })
}

/// Write a dataset split in the loader's format.
pub fn write_delimited(examples: &[Example], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        let ids: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
        out.push_str(&ids.join(" "));
        out.push('\t');
        out.push_str(&e.label.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
