use std::path::Path;

use diffcore::ParamStore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Resumable generator position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a `u128` exactly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dsd,
    Satn,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: ParamStore,
    /// Discriminator weights, when the stage trained one.
    pub disc: Option<ParamStore>,
    pub config: TrainConfig,
    pub step: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    stage: Stage,
    config: TrainConfig,
    step: usize,
    rng: RngState,
}

const PARAM: &str = "param/";
const DISC: &str = "disc/";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = Meta {
            kind: "checkpoint".into(),
            stage: self.stage,
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (name, t) in self.params.iter() {
            c.push(format!("{PARAM}{name}"), t.clone());
        }
        for (name, t) in self.disc.iter().flat_map(|d| d.iter()) {
            c.push(format!("{DISC}{name}"), t.clone());
        }
        c.write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::read(dir)?;
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != "checkpoint" {
            return Err(Error::MissingData(format!("{} holds a {}, not a checkpoint", dir.display(), meta.kind)));
        }
        let mut params = ParamStore::new();
        let mut disc = ParamStore::new();
        for (name, t) in c.entries() {
            let mut t = t.clone();
            t.clear_grad();
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t)?;
            } else if let Some(n) = name.strip_prefix(DISC) {
                disc.insert(n, t)?;
            }
        }
        Ok(Self {
            stage: meta.stage,
            params,
            disc: (!disc.is_empty()).then_some(disc),
            config: meta.config,
            step: meta.step,
            rng: meta.rng,
        })
    }

    /// Fails unless `expected` names exactly the stored parameters with the
    /// same shapes.
    pub fn check_matches(&self, expected: &ParamStore) -> Result<()> {
        let mismatch = |reason: String| Error::Container {
            name: "checkpoint".into(),
            reason,
        };
        if self.params.len() != expected.len() {
            return Err(mismatch(format!(
                "{} parameters stored, model needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, t) in expected.iter() {
            let got = self
                .params
                .get(name)
                .ok_or_else(|| mismatch(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    what: name.to_string(),
                    expected: t.shape().to_vec(),
                    actual: got.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
