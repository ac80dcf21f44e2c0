//! Listening-test aggregation and grayscale plots of alignments and spectrograms.

mod mos;
mod plot;

pub use mos::{aggregate_mos, format_mos, Exclusion, MosReport, Rating, RatingSet, SystemScore, MIN_RATINGS};
pub use plot::{alignment_image, plot_alignment, plot_spectrogram, spectrogram_image, Pgm};
