//! Line-delimited dataset files: a header line followed by one example per
//! line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::VideoFeatureSequence;
use crate::model::Query;
use crate::objective::Segment;
use crate::text_encoder::Vocabulary;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingExample {
    pub id: String,
    pub video: VideoFeatureSequence,
    pub tokens: Vec<usize>,
    /// Normalized by the model input length.
    pub gt: Segment,
}

impl GroundingExample {
    pub fn query(&self) -> Query<'_> {
        Query { video: &self.video.clips, tokens: &self.tokens }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_v: usize,
    pub input_length: usize,
    pub vocabulary: Vocabulary,
    pub examples: Vec<GroundingExample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    d_v: usize,
    input_length: usize,
    vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    tokens: Vec<usize>,
    video: Vec<Vec<f64>>,
    gt: [f64; 2],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format_version: DATASET_FORMAT_VERSION,
            d_v: self.d_v,
            input_length: self.input_length,
            vocabulary: self.vocabulary.tokens().to_vec(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for ex in &self.examples {
            let video = (0..ex.video.valid_length).map(|r| ex.video.clips.row(r).to_vec()).collect();
            let rec = Record { id: ex.id.clone(), tokens: ex.tokens.clone(), video, gt: [ex.gt.start, ex.gt.end] };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    /// Reads a dataset, truncating or padding every video to `input_length`
    /// clips (the header's length unless overridden).
    pub fn read_from(r: impl BufRead, input_length: Option<usize>) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Input("empty dataset file".into()))??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::Input(format!("bad dataset header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported dataset format version {}", header.format_version)));
        }
        let vocabulary = Vocabulary::from_tokens(header.vocabulary)?;
        let input_length = input_length.unwrap_or(header.input_length);
        let mut examples = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::Input(format!("dataset line {}: {e}", n + 2)))?;
            let video = VideoFeatureSequence::ingest(&rec.video, input_length, header.d_v)?;
            if let Some(&bad) = rec.tokens.iter().find(|&&t| t >= vocabulary.size()) {
                return Err(Error::Input(format!("example {}: token {bad} outside the vocabulary", rec.id)));
            }
            examples.push(GroundingExample {
                id: rec.id,
                video,
                tokens: rec.tokens,
                gt: Segment::new(rec.gt[0], rec.gt[1])?,
            });
        }
        Ok(Dataset { d_v: header.d_v, input_length, vocabulary, examples })
    }

    pub fn load(path: &Path, input_length: Option<usize>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), input_length)
    }
}
