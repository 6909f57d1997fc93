//! Frozen encoders for slots, values and last states, and the tunable utterance encoder.

use fpdsc_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ModelError, OntologyError};
use crate::layers::{positional_encoding, TransformerStack};
use crate::ontology::{DialogueState, Ontology};
use crate::vocab::{slot_tokens, tokenize, Vocabulary, CLS, SEP};

/// Longest token sequence fed to the utterance encoder, delimiters included.
pub const MAX_SEQ_LEN: usize = 64;

fn normal_table<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

/// Frozen random embeddings with mean pooling over `[CLS] … [SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedEncoder {
    pub embedding: ParamId,
    pub d: usize,
}

impl FixedEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, vocab_len: usize, d: usize, rng: &mut R) -> Self {
        let embedding = store.add("fixed.embedding", normal_table(rng, vocab_len, d, 1.0), true);
        Self { embedding, d }
    }

    fn pool(&self, store: &ParamStore, vocab: &Vocabulary, segments: &[Vec<String>]) -> Vec<f64> {
        let table = store.get(self.embedding).tensor.data();
        let mut ids = vec![vocab.id(CLS)];
        for seg in segments {
            ids.extend(vocab.encode(seg));
            ids.push(vocab.id(SEP));
        }
        let mut out = vec![0.0; self.d];
        for id in &ids {
            for (o, x) in out.iter_mut().zip(&table[id * self.d..(id + 1) * self.d]) {
                *o += x;
            }
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn encode_slot(&self, store: &ParamStore, vocab: &Vocabulary, slot: &str) -> Vec<f64> {
        self.pool(store, vocab, &[slot_tokens(slot)])
    }

    pub fn encode_value(&self, store: &ParamStore, vocab: &Vocabulary, value: &str) -> Vec<f64> {
        self.pool(store, vocab, &[tokenize(value)])
    }

    /// Encodes `[CLS] slot [SEP] value [SEP]`.
    pub fn encode_slot_value_pair(&self, store: &ParamStore, vocab: &Vocabulary, slot: &str, value: &str) -> Vec<f64> {
        self.pool(store, vocab, &[slot_tokens(slot), tokenize(value)])
    }
}

/// Every frozen encoding the model needs, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedCache {
    d: usize,
    /// `[|S| × d]` slot vectors in ontology order.
    pub slots: Tensor,
    /// Per slot, `[|V_s| × d]` candidate value vectors in candidate order.
    pub values: Vec<Tensor>,
    /// Per slot, `[|V_s| × d]` slot-value pair vectors in candidate order.
    pub pairs: Vec<Tensor>,
}

impl FixedCache {
    pub fn build(encoder: &FixedEncoder, store: &ParamStore, vocab: &Vocabulary, ontology: &Ontology) -> Self {
        let d = encoder.d;
        let slots: Vec<f64> = ontology
            .slots
            .iter()
            .flat_map(|s| encoder.encode_slot(store, vocab, s))
            .collect();
        let mut values = Vec::with_capacity(ontology.num_slots());
        let mut pairs = Vec::with_capacity(ontology.num_slots());
        for slot in &ontology.slots {
            let cands = &ontology.values[slot];
            let v: Vec<f64> = cands
                .iter()
                .flat_map(|c| encoder.encode_value(store, vocab, c))
                .collect();
            let p: Vec<f64> = cands
                .iter()
                .flat_map(|c| encoder.encode_slot_value_pair(store, vocab, slot, c))
                .collect();
            values.push(Tensor::matrix(cands.len(), d, v).expect("non-empty candidates"));
            pairs.push(Tensor::matrix(cands.len(), d, p).expect("non-empty candidates"));
        }
        Self {
            d,
            slots: Tensor::matrix(ontology.num_slots(), d, slots).expect("non-empty ontology"),
            values,
            pairs,
        }
    }

    /// `[|S| × d]` last-state representation; row `k` encodes slot `k` with its value in `state`.
    pub fn encode_last_state(&self, ontology: &Ontology, state: &DialogueState) -> Result<Tensor, OntologyError> {
        let mut data = Vec::with_capacity(ontology.num_slots() * self.d);
        for (k, slot) in ontology.slots.iter().enumerate() {
            let value = state
                .get(slot)
                .ok_or_else(|| OntologyError::MissingSlot(slot.clone()))?;
            let i = ontology.value_index(slot, value)?;
            data.extend_from_slice(&self.pairs[k].data()[i * self.d..(i + 1) * self.d]);
        }
        Ok(Tensor::matrix(ontology.num_slots(), self.d, data).expect("non-empty ontology"))
    }
}

/// Token ids for `[CLS] system [SEP] user [SEP]`, truncated from the front of the system side.
pub fn utterance_ids(vocab: &Vocabulary, system: &str, user: &str, max_len: usize) -> Result<Vec<usize>, ModelError> {
    let mut sys = tokenize(system);
    let mut usr = tokenize(user);
    if sys.is_empty() && usr.is_empty() {
        return Err(ModelError::Input("both utterances are empty".into()));
    }
    let budget = max_len.saturating_sub(3);
    if budget == 0 {
        return Err(ModelError::Input(format!(
            "max sequence length {max_len} leaves no room for tokens"
        )));
    }
    if sys.len() + usr.len() > budget {
        let excess = sys.len() + usr.len() - budget;
        let from_sys = excess.min(sys.len());
        sys.drain(..from_sys);
        usr.drain(..excess - from_sys);
    }
    let mut ids = Vec::with_capacity(sys.len() + usr.len() + 3);
    ids.push(vocab.id(CLS));
    ids.extend(vocab.encode(&sys));
    ids.push(vocab.id(SEP));
    ids.extend(vocab.encode(&usr));
    ids.push(vocab.id(SEP));
    Ok(ids)
}

/// Trainable embeddings plus sinusoidal positions and a transformer stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunableEncoder {
    pub embedding: ParamId,
    pub layers: TransformerStack,
    pub d: usize,
}

impl TunableEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_len: usize,
        d: usize,
        heads: usize,
        ff: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add("encoder.embedding", normal_table(rng, vocab_len, d, 1.0), false);
        let layers = TransformerStack::new(store, "encoder", layers, d, heads, ff, rng);
        Self { embedding, layers, d }
    }

    /// One output row per input token.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Input("empty token sequence".into()));
        }
        let table = g.param(store, self.embedding);
        let picks: Vec<(usize, usize)> = ids.iter().map(|&i| (0, i)).collect();
        let x = g.gather_rows(&[table], &picks)?;
        let pe = g.constant(Tensor::matrix(
            ids.len(),
            self.d,
            positional_encoding(ids.len(), self.d),
        )?);
        let x = g.add(x, pe)?;
        Ok(self.layers.forward(g, store, x, ids.len())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{generate_ontology, OntologySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Ontology, Vocabulary, ParamStore, FixedEncoder) {
        let o = generate_ontology(&OntologySpec::default(), 1).unwrap();
        let v = Vocabulary::build(&o, []);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = FixedEncoder::new(&mut store, v.len(), 16, &mut rng);
        (o, v, store, enc)
    }

    #[test]
    fn last_state_is_row_local() {
        let (o, v, store, enc) = setup();
        let cache = FixedCache::build(&enc, &store, &v, &o);
        let empty = o.empty_state();
        let a = cache.encode_last_state(&o, &empty).unwrap();
        let mut changed = empty.clone();
        let value = o.candidates("hotel-area").unwrap()[2].clone();
        changed.set("hotel-area", &value);
        let b = cache.encode_last_state(&o, &changed).unwrap();
        let k = o.slot_index("hotel-area").unwrap();
        for r in 0..o.num_slots() {
            let same = a.data()[r * 16..(r + 1) * 16] == b.data()[r * 16..(r + 1) * 16];
            assert_eq!(same, r != k, "row {r}");
        }
        let expected = enc.encode_slot_value_pair(&store, &v, "hotel-area", &value);
        assert_eq!(&b.data()[k * 16..(k + 1) * 16], expected.as_slice());
        let mut missing = empty;
        missing.0.remove("taxi-departure");
        assert!(matches!(
            cache.encode_last_state(&o, &missing),
            Err(OntologyError::MissingSlot(s)) if s == "taxi-departure"
        ));
    }

    #[test]
    fn truncation_drops_system_front() {
        let (_, v, _, _) = setup();
        let sys = (0..100).map(|_| "please").collect::<Vec<_>>().join(" ") + " hotel";
        let ids = utterance_ids(&v, &sys, "thank you", MAX_SEQ_LEN).unwrap();
        assert_eq!(ids.len(), MAX_SEQ_LEN);
        assert_eq!(ids[ids.len() - 5], v.id("hotel"));
        assert_eq!(utterance_ids(&v, "", "hi", 64).unwrap().len(), 4);
        assert!(utterance_ids(&v, " ", "", 64).is_err());
    }
}
