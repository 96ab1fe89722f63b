//! Bit-exact persistence of (quantized) extracted features so that new tasks
//! can be trained later without re-running the encoder.
//!
//! Record layout, little-endian:
//!
//! ```text
//! "AMTF" | version u16 | doc_id (u16 len + UTF-8) | fingerprint u64
//! | stage u8 | scheme u8 | [scale f32, zero_point u8 if uint8]
//! | rank u8 | dims u32 × rank | payload
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::encoder::LayerFeatures;
use crate::error::{Error, Result};
use crate::pooling::PositionFeatures;
use crate::quant::{self, payload_len, QuantScheme, QuantizedFeatures};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

const MAGIC: &[u8; 4] = b"AMTF";
const VERSION: u16 = 1;
pub const FILE_EXTENSION: &str = "amtf";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingStage {
    /// `[layers × n × d]`, Transformer outputs without the embedding layer.
    RawLayers,
    /// `[n × d]` after layer pooling.
    LayerPooled,
}

impl PoolingStage {
    fn tag(self) -> u8 {
        match self {
            PoolingStage::RawLayers => 0,
            PoolingStage::LayerPooled => 1,
        }
    }

    fn rank(self) -> usize {
        match self {
            PoolingStage::RawLayers => 3,
            PoolingStage::LayerPooled => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    doc_id: String,
    encoder_fingerprint: u64,
    pooling_stage: PoolingStage,
    quantized: QuantizedFeatures,
    token_count: usize,
}

impl FeatureRecord {
    pub fn new(
        doc_id: impl Into<String>,
        encoder_fingerprint: u64,
        pooling_stage: PoolingStage,
        quantized: QuantizedFeatures,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        if doc_id.is_empty()
            || doc_id.len() > u16::MAX as usize
            || doc_id.contains(['/', '\\'])
            || doc_id.starts_with('.')
        {
            return Err(Error::Param(format!("invalid document id {doc_id:?}")));
        }
        let shape = quantized.shape();
        if shape.len() != pooling_stage.rank() {
            return Err(Error::Param(format!(
                "{pooling_stage:?} features must be rank {}, got {shape:?}",
                pooling_stage.rank()
            )));
        }
        let token_count = shape[shape.len() - 2];
        Ok(Self {
            doc_id,
            encoder_fingerprint,
            pooling_stage,
            quantized,
            token_count,
        })
    }

    /// Quantizes raw encoder output, dropping the embedding layer.
    pub fn from_layers(
        doc_id: impl Into<String>,
        encoder_fingerprint: u64,
        features: &LayerFeatures,
        scheme: &QuantScheme,
    ) -> Result<Self> {
        let stored = features.without_embedding();
        let q = quant::quantize(stored.values(), scheme)?;
        Self::new(doc_id, encoder_fingerprint, PoolingStage::RawLayers, q)
    }

    pub fn from_positions(
        doc_id: impl Into<String>,
        encoder_fingerprint: u64,
        features: &PositionFeatures,
        scheme: &QuantScheme,
    ) -> Result<Self> {
        let q = quant::quantize(features.values(), scheme)?;
        Self::new(doc_id, encoder_fingerprint, PoolingStage::LayerPooled, q)
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn encoder_fingerprint(&self) -> u64 {
        self.encoder_fingerprint
    }

    pub fn pooling_stage(&self) -> PoolingStage {
        self.pooling_stage
    }

    pub fn quantized(&self) -> &QuantizedFeatures {
        &self.quantized
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        quant::dequantize(&self.quantized)
    }

    /// Dequantized raw layers (`first_layer = 1`).
    pub fn layer_features(&self) -> Result<LayerFeatures> {
        if self.pooling_stage != PoolingStage::RawLayers {
            return Err(Error::Param(format!(
                "{} holds layer-pooled features",
                self.doc_id
            )));
        }
        LayerFeatures::new(self.dequantize()?, 1)
    }

    pub fn position_features(&self) -> Result<PositionFeatures> {
        if self.pooling_stage != PoolingStage::LayerPooled {
            return Err(Error::Param(format!("{} holds raw layers", self.doc_id)));
        }
        PositionFeatures::new(self.dequantize()?)
    }

    /// Refuses features produced by a different encoder.
    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.encoder_fingerprint != expected {
            return Err(Error::Param(format!(
                "stale features for {}: encoder fingerprint {:016x}, expected {expected:016x}",
                self.doc_id, self.encoder_fingerprint
            )));
        }
        Ok(())
    }
}

pub fn write_features<W: Write>(sink: W, record: &FeatureRecord) -> Result<()> {
    let mut w = Writer::new(sink);
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    w.str16(&record.doc_id)?;
    w.u64(record.encoder_fingerprint)?;
    w.u8(record.pooling_stage.tag())?;
    quant::write_scheme(&mut w, record.quantized.scheme())?;
    w.dims(record.quantized.shape())?;
    w.bytes(record.quantized.payload())?;
    w.flush()
}

pub fn read_features<R: Read>(source: R) -> Result<FeatureRecord> {
    let mut r = Reader::new(source);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let doc_id = r.str16("document id")?;
    let fingerprint = r.u64("fingerprint")?;
    let at = r.offset();
    let stage = match r.u8("pooling stage")? {
        0 => PoolingStage::RawLayers,
        1 => PoolingStage::LayerPooled,
        t => return Err(Error::format(at, format!("unknown pooling stage {t}"))),
    };
    let scheme = quant::read_scheme(&mut r)?;
    let at = r.offset();
    let dims = r.dims()?;
    if dims.len() != stage.rank() {
        return Err(Error::format(
            at,
            format!("{stage:?} record has rank {}", dims.len()),
        ));
    }
    let len = payload_len(&dims, &scheme);
    let payload = r.vec(len, "payload")?;
    r.finish()?;
    let q = QuantizedFeatures::from_parts(scheme, dims, payload)?;
    FeatureRecord::new(doc_id, fingerprint, stage, q)
}

/// A directory of `<doc_id>.amtf` files.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    dir: PathBuf,
}

impl FeatureStore {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::Input(format!(
                "feature store {} does not exist",
                dir.display()
            )));
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, doc_id: &str) -> PathBuf {
        self.dir.join(format!("{doc_id}.{FILE_EXTENSION}"))
    }

    pub fn write(&self, record: &FeatureRecord) -> Result<()> {
        let file = File::create(self.path_for(record.doc_id()))?;
        write_features(BufWriter::new(file), record)
    }

    pub fn read(&self, doc_id: &str) -> Result<FeatureRecord> {
        let file = File::open(self.path_for(doc_id))?;
        let record = read_features(BufReader::new(file))?;
        if record.doc_id() != doc_id {
            return Err(Error::format(
                6,
                format!("file for {doc_id} holds {}", record.doc_id()),
            ));
        }
        Ok(record)
    }

    /// Reads a record, refusing it if it came from another encoder.
    pub fn read_checked(&self, doc_id: &str, fingerprint: Option<u64>) -> Result<FeatureRecord> {
        let record = self.read(doc_id)?;
        if let Some(fp) = fingerprint {
            record.check_fingerprint(fp)?;
        }
        Ok(record)
    }

    /// Sorted document ids present in the store.
    pub fn doc_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(FILE_EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}
