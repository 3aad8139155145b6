use super::config::{Group, ModelConfig};
use crate::corpus::mulaw::NUM_CODES;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::rng::{normal_tensor, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

/// Resolved parameter handles, so forward passes avoid name lookups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tenc_embed: ParamId,
    pub tenc_convs: Vec<Dense>,
    pub senc_convs: Vec<Dense>,
    pub tdec_hidden: Dense,
    pub tdec_out: Dense,
    pub sdec_z: Dense,
    pub sdec_prev: ParamId,
    pub sdec_spk: ParamId,
    pub sdec_out: Dense,
    pub voc_in: Dense,
    pub voc_cond: Dense,
    pub voc_spk: ParamId,
    pub voc_layers: Vec<Dense>,
    pub voc_post: Dense,
    pub voc_out: Dense,
    pub speaker_table: ParamId,
}

/// Expected `(name, rows, cols)` of every parameter, in storage order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let dense = |out: &mut Vec<_>, name: &str, rows: usize, cols: usize| {
        out.push((format!("{name}.w"), rows, cols));
        out.push((format!("{name}.b"), 1, cols));
    };
    out.push(("tenc.embed".to_string(), c.vocab_size, c.embed_dim));
    for (prefix, input) in [("tenc", c.embed_dim), ("senc", c.feature_dim)] {
        for l in 0..c.enc_layers {
            let cin = if l == 0 { input } else { c.enc_channels };
            let cout = if l + 1 == c.enc_layers { 2 * c.latent_dim } else { c.enc_channels };
            dense(&mut out, &format!("{prefix}.conv{l}"), c.enc_kernel * cin, cout);
        }
    }
    dense(&mut out, "tdec.hidden", c.latent_dim, c.tdec_hidden);
    dense(&mut out, "tdec.out", c.tdec_hidden, c.vocab_size);
    dense(&mut out, "sdec.z", c.latent_dim, c.dec_hidden);
    out.push(("sdec.prev.w".to_string(), c.feature_dim, c.dec_hidden));
    out.push(("sdec.spk.w".to_string(), c.speaker_dim, c.dec_hidden));
    dense(&mut out, "sdec.out", c.dec_hidden, c.feature_dim);
    dense(&mut out, "voc.in", 2, c.voc_channels);
    dense(&mut out, "voc.cond", c.feature_dim, c.voc_channels);
    out.push(("voc.spk.w".to_string(), c.speaker_dim, c.voc_channels));
    for l in 0..c.voc_dilations.len() {
        dense(&mut out, &format!("voc.layer{l}"), 2 * c.voc_channels, c.voc_channels);
    }
    dense(&mut out, "voc.post", c.voc_channels, c.voc_channels);
    dense(&mut out, "voc.out", c.voc_channels, NUM_CODES);
    out.push(("speaker_table".to_string(), c.speaker_rows(), c.speaker_dim));
    out
}

/// Network parameters plus the speaker names bound to table rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
    /// One name per speaker-table row; the last row is the target slot
    /// and stays empty until adaptation names it.
    speakers: Vec<String>,
}

impl ModelParams {
    /// Fresh weights drawn from `config.init_seed`. Weights are
    /// `N(0, 1/fan_in)`, biases zero, speaker rows `N(0, 0.1²)`.
    pub fn init(config: &ModelConfig, speakers: &[String]) -> Result<Self> {
        config.validate()?;
        if speakers.len() != config.speakers {
            return Err(Error::InvalidConfig(format!(
                "model.speakers is {} but {} training speakers were given",
                config.speakers,
                speakers.len()
            )));
        }
        let mut store = ParamStore::new();
        for (i, (name, rows, cols)) in param_shapes(config).into_iter().enumerate() {
            let mut rng = rng_from(config.init_seed, &[i as u64]);
            let value = if name.ends_with(".b") {
                Tensor::zeros(rows, cols)
            } else if name == "speaker_table" {
                normal_tensor(&mut rng, rows, cols, 0.1)
            } else if name == "tenc.embed" {
                normal_tensor(&mut rng, rows, cols, 1.0)
            } else {
                normal_tensor(&mut rng, rows, cols, 1.0 / (rows as f64).sqrt())
            };
            store.add(name, value);
        }
        let mut names = speakers.to_vec();
        names.push(String::new());
        Self::from_parts(config.clone(), store, names)
    }

    /// Validates shapes against `config` and resolves the layout.
    pub fn from_parts(config: ModelConfig, store: ParamStore, speakers: Vec<String>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if store.len() != shapes.len() {
            return Err(Error::format(
                "model parameters",
                format!("expected {} tensors, found {}", shapes.len(), store.len()),
            ));
        }
        for (entry, (name, rows, cols)) in store.entries().iter().zip(&shapes) {
            if &entry.name != name || entry.value.shape() != (*rows, *cols) {
                return Err(Error::format(
                    "model parameters",
                    format!(
                        "expected `{name}` {rows}x{cols}, found `{}` {}x{}",
                        entry.name,
                        entry.value.rows(),
                        entry.value.cols()
                    ),
                ));
            }
        }
        if !store.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        if speakers.len() != config.speaker_rows() {
            return Err(Error::format(
                "model parameters",
                format!("expected {} speaker names, found {}", config.speaker_rows(), speakers.len()),
            ));
        }
        let layout = resolve(&store, &config);
        Ok(Self {
            config,
            store,
            layout,
            speakers,
        })
    }

    /// Same model with `store` swapped in. `store` must have this model's
    /// parameter names and shapes (e.g. a perturbed copy of [`Self::store`]).
    pub fn with_store(&self, store: ParamStore) -> Self {
        assert_eq!(store.len(), self.store.len(), "parameter count");
        Self {
            config: self.config.clone(),
            store,
            layout: self.layout.clone(),
            speakers: self.speakers.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn target_slot(&self) -> usize {
        self.speakers.len() - 1
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Result<usize> {
        if speaker_id.is_empty() {
            return Err(Error::UnknownSpeaker(speaker_id.into()));
        }
        self.speakers
            .iter()
            .position(|s| s == speaker_id)
            .ok_or_else(|| Error::UnknownSpeaker(speaker_id.into()))
    }

    /// Binds the target slot to `speaker_id` and initializes its
    /// embedding to the mean of the training speakers' rows.
    pub fn bind_target(&mut self, speaker_id: &str) -> Result<()> {
        if speaker_id.is_empty() {
            return Err(Error::UnknownSpeaker(String::new()));
        }
        let slot = self.target_slot();
        if self.speakers[..slot].iter().any(|s| s == speaker_id) {
            return Err(Error::Contract(format!(
                "`{speaker_id}` is a training speaker and cannot be the adaptation target"
            )));
        }
        let table = self.store.get_mut(self.layout.speaker_table);
        let mut mean = vec![0.0; table.cols()];
        for r in 0..slot {
            for (m, v) in mean.iter_mut().zip(table.row(r)) {
                *m += v / slot as f64;
            }
        }
        table.row_mut(slot).copy_from_slice(&mean);
        self.speakers[slot] = speaker_id.into();
        Ok(())
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        Group::of_param(self.store.name(id)).expect("parameter names carry a group prefix")
    }

    /// Per-parameter mask: true when the parameter's group is listed.
    pub fn mask(&self, groups: &[Group]) -> Vec<bool> {
        self.store.ids().map(|id| groups.contains(&self.group_of(id))).collect()
    }

    /// Parameter ids of one group, in storage order.
    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group_of(id) == group).collect()
    }

    /// Little-endian bytes of every parameter of `group`.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for id in self.group_ids(group) {
            for v in self.store.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn resolve(store: &ParamStore, c: &ModelConfig) -> Layout {
    let id = |name: &str| store.id(name).unwrap_or_else(|| panic!("parameter `{name}` present"));
    let dense = |name: &str| Dense {
        w: id(&format!("{name}.w")),
        b: id(&format!("{name}.b")),
    };
    Layout {
        tenc_embed: id("tenc.embed"),
        tenc_convs: (0..c.enc_layers).map(|l| dense(&format!("tenc.conv{l}"))).collect(),
        senc_convs: (0..c.enc_layers).map(|l| dense(&format!("senc.conv{l}"))).collect(),
        tdec_hidden: dense("tdec.hidden"),
        tdec_out: dense("tdec.out"),
        sdec_z: dense("sdec.z"),
        sdec_prev: id("sdec.prev.w"),
        sdec_spk: id("sdec.spk.w"),
        sdec_out: dense("sdec.out"),
        voc_in: dense("voc.in"),
        voc_cond: dense("voc.cond"),
        voc_spk: id("voc.spk.w"),
        voc_layers: (0..c.voc_dilations.len()).map(|l| dense(&format!("voc.layer{l}"))).collect(),
        voc_post: dense("voc.post"),
        voc_out: dense("voc.out"),
        speaker_table: id("speaker_table"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("A{i:02}")).collect()
    }

    #[test]
    fn every_parameter_has_exactly_one_group() {
        let c = ModelConfig::default();
        let m = ModelParams::init(&c, &names(8)).unwrap();
        let mut total = 0;
        for g in Group::ALL {
            let ids = m.group_ids(g);
            assert!(!ids.is_empty(), "{g} empty");
            total += ids.len();
        }
        assert_eq!(total, m.store().len());
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        assert_eq!(ModelParams::init(&c, &names(8)).unwrap(), ModelParams::init(&c, &names(8)).unwrap());
        assert!(ModelParams::init(&c, &names(3)).is_err());
    }

    #[test]
    fn target_binding() {
        let c = ModelConfig::default();
        let mut m = ModelParams::init(&c, &names(8)).unwrap();
        assert!(m.speaker_index("").is_err());
        assert!(m.bind_target("A03").is_err());
        m.bind_target("B00").unwrap();
        assert_eq!(m.speaker_index("B00").unwrap(), 8);
        let table = m.store().get(m.layout().speaker_table);
        let mean0: f64 = (0..8).map(|r| table.get(r, 0)).sum::<f64>() / 8.0;
        assert!((table.get(8, 0) - mean0).abs() < 1e-12);
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let c = ModelConfig::default();
        let m = ModelParams::init(&c, &names(8)).unwrap();
        let other = ModelConfig { latent_dim: 4, ..c };
        assert!(ModelParams::from_parts(other, m.store().clone(), m.speakers().to_vec()).is_err());
    }
}
