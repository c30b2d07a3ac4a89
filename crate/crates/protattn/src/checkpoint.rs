//! Single-file checkpoints: a plain-text header describing seed, config,
//! labels, vocabulary, and a tensor directory, followed by one binary blob
//! of little-endian 64-bit values in directory order.
//!
//! The header is line-oriented UTF-8 and diff-friendly; the blob preserves
//! every value bit-for-bit, so a saved model replays byte-identical
//! predictions after loading.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    AttentionKind, CellKind, MlpParams, ModelParams, ModelShape, ScoreMode,
};
use crate::seqdata::{LabelTable, Vocabulary};
use crate::tensor::Tensor;

const MAGIC: &str = "protattn-checkpoint v1";

/// Generic checkpoint payload before typed interpretation.
#[derive(Clone, Debug)]
pub struct Container {
    pub seed: u64,
    /// Resolved run configuration, echoed verbatim.
    pub config: Vec<(String, String)>,
    pub labels: Vec<String>,
    /// Token vocabulary `(n, learned tokens)`, absent for head-only files.
    pub vocab: Option<(usize, Vec<String>)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("seed {}\n", self.seed));
        for (k, v) in &self.config {
            if k.contains(char::is_whitespace) {
                return Err(Error::checkpoint(format!("config key `{k}` contains whitespace")));
            }
            if v.contains('\n') {
                return Err(Error::checkpoint(format!("config value for `{k}` spans lines")));
            }
            header.push_str(&format!("config {k} {v}\n"));
        }
        header.push_str("labels");
        for name in &self.labels {
            if name.contains('\t') || name.contains('\n') {
                return Err(Error::checkpoint(format!("label `{name}` contains separators")));
            }
            header.push('\t');
            header.push_str(name);
        }
        header.push('\n');
        if let Some((n, tokens)) = &self.vocab {
            header.push_str(&format!("vocab {n}"));
            for t in tokens {
                if t.contains(char::is_whitespace) {
                    return Err(Error::checkpoint(format!("token `{t}` contains whitespace")));
                }
                header.push(' ');
                header.push_str(t);
            }
            header.push('\n');
        }
        for (name, tensor) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::checkpoint(format!("tensor name `{name}` contains whitespace")));
            }
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {}\n", name, dims.join("x")));
        }
        header.push_str("data\n");

        let mut file = fs::File::create(path)?;
        file.write_all(header.as_bytes())?;
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let data_marker = b"\ndata\n";
        let split = find_subslice(&bytes, data_marker)
            .ok_or_else(|| Error::checkpoint("missing data section"))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::checkpoint("header is not UTF-8"))?;
        let blob = &bytes[split + data_marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::checkpoint("unrecognized file format"));
        }
        let mut seed = None;
        let mut config = Vec::new();
        let mut labels = None;
        let mut vocab = None;
        let mut directory: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let (tag, rest) = line.split_once(|c| c == ' ' || c == '\t').unwrap_or((line, ""));
            match tag {
                "seed" => {
                    seed = Some(rest.parse::<u64>().map_err(|_| {
                        Error::checkpoint(format!("bad seed `{rest}`"))
                    })?);
                }
                "config" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::checkpoint(format!("bad config line `{line}`")))?;
                    config.push((k.to_string(), v.to_string()));
                }
                "labels" => {
                    labels = Some(if rest.is_empty() {
                        Vec::new()
                    } else {
                        rest.split('\t').map(str::to_string).collect()
                    });
                }
                "vocab" => {
                    let mut parts = rest.split(' ');
                    let n: usize = parts
                        .next()
                        .and_then(|p| p.parse().ok())
                        .ok_or_else(|| Error::checkpoint("bad vocab line"))?;
                    vocab = Some((n, parts.map(str::to_string).collect()));
                }
                "tensor" => {
                    let (name, dims) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::checkpoint(format!("bad tensor line `{line}`")))?;
                    let shape: Vec<usize> = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::checkpoint(format!("bad tensor shape `{dims}`")))?;
                    directory.push((name.to_string(), shape));
                }
                "" => {}
                other => {
                    return Err(Error::checkpoint(format!("unknown header entry `{other}`")));
                }
            }
        }
        let seed = seed.ok_or_else(|| Error::checkpoint("missing seed"))?;
        let labels = labels.ok_or_else(|| Error::checkpoint("missing labels"))?;

        let total: usize = directory.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if blob.len() != total * 8 {
            return Err(Error::checkpoint(format!(
                "payload holds {} bytes, directory expects {}",
                blob.len(),
                total * 8
            )));
        }
        let mut tensors = Vec::with_capacity(directory.len());
        let mut offset = 0;
        for (name, shape) in directory {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let at = (offset + i) * 8;
                let raw: [u8; 8] = blob[at..at + 8].try_into().expect("length checked");
                data.push(f64::from_le_bytes(raw));
            }
            offset += numel;
            tensors.push((name, Tensor::new_unchecked(shape, data)));
        }
        Ok(Container {
            seed,
            config,
            labels,
            vocab,
            tensors,
        })
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn attention_str(kind: AttentionKind) -> &'static str {
    match kind {
        AttentionKind::Scaled => "scaled",
        AttentionKind::Standard => "standard",
        AttentionKind::LastHidden => "last-hidden",
    }
}

pub(crate) fn parse_attention(s: &str) -> Result<AttentionKind> {
    match s {
        "scaled" => Ok(AttentionKind::Scaled),
        "standard" => Ok(AttentionKind::Standard),
        "last-hidden" | "none" => Ok(AttentionKind::LastHidden),
        other => Err(Error::checkpoint(format!("unknown attention kind `{other}`"))),
    }
}

fn cell_str(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Gru => "gru",
        CellKind::Lstm => "lstm",
    }
}

pub(crate) fn parse_cell(s: &str) -> Result<CellKind> {
    match s {
        "gru" => Ok(CellKind::Gru),
        "lstm" => Ok(CellKind::Lstm),
        other => Err(Error::checkpoint(format!("unknown cell kind `{other}`"))),
    }
}

fn score_str(mode: ScoreMode) -> String {
    match mode {
        ScoreMode::Scalar => "scalar".into(),
        ScoreMode::ContextVector { dim } => format!("context:{dim}"),
    }
}

pub(crate) fn parse_score(s: &str) -> Result<ScoreMode> {
    if s == "scalar" {
        return Ok(ScoreMode::Scalar);
    }
    if let Some(dim) = s.strip_prefix("context:") {
        let dim: usize = dim
            .parse()
            .map_err(|_| Error::checkpoint(format!("bad score dimension `{dim}`")))?;
        return Ok(ScoreMode::ContextVector { dim });
    }
    Err(Error::checkpoint(format!("unknown score mode `{s}`")))
}

/// A trained segment classifier with everything inference needs: the
/// vocabulary it tokenized with, the label table it predicts over, and the
/// segmentation geometry.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: ModelParams,
    pub attention: AttentionKind,
    pub segment_size: usize,
    pub n: usize,
    pub seed: u64,
    pub labels: LabelTable,
    pub vocab: Vocabulary,
    pub config: Vec<(String, String)>,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = vec![
            ("attention".to_string(), attention_str(self.attention).to_string()),
            ("cell".to_string(), cell_str(self.model.cell_kind()).to_string()),
            ("score".to_string(), score_str(self.model.score_mode())),
            ("lambda".to_string(), format!("{:?}", self.model.attention.lambda)),
            ("segment_size".to_string(), self.segment_size.to_string()),
            ("n".to_string(), self.n.to_string()),
        ];
        config.extend(self.config.iter().cloned());
        let container = Container {
            seed: self.seed,
            config,
            labels: self.labels.names().to_vec(),
            vocab: Some((self.vocab.n(), self.vocab.tokens().to_vec())),
            tensors: self
                .model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        };
        container.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::load(path)?;
        let get = |key: &str| -> Result<&str> {
            container
                .config
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::checkpoint(format!("missing `{key}` entry")))
        };
        let attention = parse_attention(get("attention")?)?;
        let cell = parse_cell(get("cell")?)?;
        let score = parse_score(get("score")?)?;
        let lambda: f64 = get("lambda")?
            .parse()
            .map_err(|_| Error::checkpoint("bad lambda"))?;
        let segment_size: usize = get("segment_size")?
            .parse()
            .map_err(|_| Error::checkpoint("bad segment_size"))?;
        let n: usize = get("n")?.parse().map_err(|_| Error::checkpoint("bad n"))?;

        let (vocab_n, tokens) = container
            .vocab
            .clone()
            .ok_or_else(|| Error::checkpoint("model checkpoint lacks a vocabulary"))?;
        if vocab_n != n {
            return Err(Error::checkpoint(format!(
                "vocabulary n = {vocab_n} disagrees with segmentation n = {n}"
            )));
        }
        let vocab = Vocabulary::from_tokens(vocab_n, tokens);

        let table = &container
            .tensors
            .first()
            .ok_or_else(|| Error::checkpoint("no tensors"))?
            .1;
        let label_count = container.labels.len();
        if label_count == 0 {
            return Err(Error::checkpoint("empty label table"));
        }
        let hidden = container
            .tensors
            .iter()
            .find(|(n, _)| n.ends_with("fwd.b_z") || n.ends_with("fwd.b_f"))
            .map(|(_, t)| t.numel())
            .ok_or_else(|| Error::checkpoint("cannot infer hidden size"))?;
        let shape = ModelShape {
            vocab_size: table.rows(),
            embed_dim: table.cols(),
            hidden_size: hidden,
            label_count,
            cell,
            score,
            lambda,
        };
        let model = ModelParams::from_named(&shape, &container.tensors)
            .map_err(|e| Error::checkpoint(format!("tensor directory mismatch: {e}")))?;
        if vocab.size() != model.vocab_size() {
            return Err(Error::checkpoint(format!(
                "vocabulary size {} disagrees with embedding table rows {}",
                vocab.size(),
                model.vocab_size()
            )));
        }
        let keep: Vec<(String, String)> = container
            .config
            .iter()
            .filter(|(k, _)| {
                !matches!(k.as_str(), "attention" | "cell" | "score" | "lambda" | "segment_size" | "n")
            })
            .cloned()
            .collect();
        Ok(ModelCheckpoint {
            model,
            attention,
            segment_size,
            n,
            seed: container.seed,
            labels: LabelTable::from_names(container.labels),
            vocab,
            config: keep,
        })
    }
}

/// A trained perceptron head with its decision threshold and label table.
#[derive(Clone, Debug)]
pub struct MlpCheckpoint {
    pub mlp: MlpParams,
    pub threshold: f64,
    pub seed: u64,
    pub labels: LabelTable,
    pub config: Vec<(String, String)>,
}

impl MlpCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = vec![("threshold".to_string(), format!("{:?}", self.threshold))];
        config.extend(self.config.iter().cloned());
        let container = Container {
            seed: self.seed,
            config,
            labels: self.labels.names().to_vec(),
            vocab: None,
            tensors: self
                .mlp
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        };
        container.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::load(path)?;
        let threshold: f64 = container
            .config
            .iter()
            .find(|(k, _)| k == "threshold")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::checkpoint("missing `threshold` entry"))?
            .parse()
            .map_err(|_| Error::checkpoint("bad threshold"))?;
        let mlp = MlpParams::from_named(&container.tensors)?;
        if mlp.outputs() != container.labels.len() {
            return Err(Error::checkpoint(format!(
                "{} outputs vs {} labels",
                mlp.outputs(),
                container.labels.len()
            )));
        }
        let keep: Vec<(String, String)> = container
            .config
            .iter()
            .filter(|(k, _)| k != "threshold")
            .cloned()
            .collect();
        Ok(MlpCheckpoint {
            mlp,
            threshold,
            seed: container.seed,
            labels: LabelTable::from_names(container.labels),
            config: keep,
        })
    }
}
