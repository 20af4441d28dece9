//! Vocabularies, parallel documents, label/alignment files and batching.

pub mod batch;
pub mod io;
pub mod vocab;

pub use batch::{make_batches, Batch, Padded};
pub use io::{
    load_documents, load_source_documents, make_examples, read_alignments, write_alignments,
    AlignmentSet, Document, Example, LabelSet, ZpLabelSequence, NO_ZP,
};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, UNK};
