//! JSON model checkpoints. Floats are stored as IEEE-754 bit patterns so a save/load cycle
//! is bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &str = "bipoint-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<T: Real = f32> {
    pub magic: String,
    pub version: u32,
    /// Element type of the stored tensors (`f32` or `f64`).
    pub element: String,
    /// Seed the model was built and trained with.
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    pub model: Model<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, seed: Option<u64>, config: Option<TrainConfig>) -> Self {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            element: T::NAME.into(),
            seed,
            config,
            model,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let ck: Checkpoint<T> = serde_json::from_reader(r)?;
        if ck.magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", format!("unexpected magic {:?}", ck.magic)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {}", ck.version)));
        }
        if ck.element != T::NAME {
            return Err(Error::format("checkpoint", format!("stores {} tensors, expected {}", ck.element, T::NAME)));
        }
        ck.model.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|source| Error::Path {
            path: path.to_owned(),
            source,
        })?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|source| Error::Path {
            path: path.to_owned(),
            source,
        })?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::nn::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_model() -> (Model<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::<f32>::build(&ModelSpec::new(4, 16), &mut rng).unwrap();
        for _ in 0..2 {
            let x = Tensor::normal(&[6, 16, 3], 0.0, 0.5, &mut rng);
            m.forward(&x, Mode::Train).unwrap();
        }
        m.refit_gmm().unwrap();
        (m, Tensor::normal(&[10, 16, 3], 0.0, 0.5, &mut rng))
    }

    #[test]
    fn save_load_predict_is_bitwise_identical() {
        let (mut m, x) = trained_model();
        m.prepare_packed();
        let before = m.predict(&x).unwrap();
        let before_packed = m.predict_packed(&x).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(m.clone(), Some(1), Some(TrainConfig::default())).save(&path).unwrap();
        let mut back = Checkpoint::<f32>::load(&path).unwrap().model;
        let after = back.predict(&x).unwrap();
        back.prepare_packed();
        let after_packed = back.predict_packed(&x).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
        assert_eq!(bits(&before_packed), bits(&after_packed));
        for (a, b) in m.binary_layers().zip(back.binary_layers()) {
            assert_eq!(a.gmm(), b.gmm());
            assert_eq!(a.alpha(), b.alpha());
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let (m, _) = trained_model();
        let mut bytes = Vec::new();
        Checkpoint::new(m, None, None).write_to(&mut bytes).unwrap();
        assert!(matches!(Checkpoint::<f64>::read_from(&bytes[..]), Err(Error::Format { .. })));
        let text = String::from_utf8(bytes).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(Checkpoint::<f32>::read_from(bumped.as_bytes()), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::<f32>::read_from(&b"{"[..]), Err(Error::Json(_))));
    }
}
