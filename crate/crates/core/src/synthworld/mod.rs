//! Synthetic face world: a linear renderer with an exact expression
//! extractor, synthetic audio features, region masks, emotion prototypes and
//! an on-disk corpus.

mod audio;
mod corpus;
mod face;
pub mod pgm;

pub use audio::{synth_audio, AudioTrack, AUDIO_DIM};
pub use corpus::{
    gen_corpus, snapshot_dir, synth_clip, ClipData, ClipSpec, Corpus, CorpusManifest, CorpusSummary,
    IndexEntry, INDEX_HEADER,
};
pub use face::{
    emotion_prototypes, make_face_basis, region_masks, FaceBasis, Frame, Prototypes, RegionMasks,
    MIN_IMAGE_SIZE, PROTOTYPE_MIN_DISTANCE, PROTOTYPE_NORM,
};
