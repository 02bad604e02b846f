//! Morphological inflection from treebanks: triple extraction, lemma-disjoint
//! splitting, temperature-sampled multilingual batching and a small
//! character-level transformer.

pub mod conllu;
pub mod eval;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod split;
pub mod store;
pub mod synthetic;
pub mod triples;

pub use conllu::{extract_triples, parse_conllu, parse_conllu_str, ConlluError, ExtractOptions, Sentence};
pub use sampler::{Token, Vocab};
pub use split::{audit_split, group_by_lemma, materialize_split, sample_split, AuditReport, Split, SplitAssignment, SplitConfig, SplitError};
pub use store::{read_canonical, write_canonical, StoreError};
pub use triples::{merge_triplesets, Triple, TripleError, TripleSet};
