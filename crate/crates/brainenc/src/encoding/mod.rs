//! The brain-encoding tail: activation extraction, TR alignment with
//! hemodynamic delay, per-parcel ridge regression with leave-one-out
//! lambda selection, and Pearson-r reporting.

mod features;
mod ridge;
mod subject;

pub use features::{
    align_to_tr, extract_features, extract_features_from, prepare_stream, FeatureMatrix,
    Provenance, Reducer, StreamCodes, WindowFeature,
};
pub use ridge::{loo_select_lambda, pearson_r, ridge_fit, Correlation, RidgeSolver};
pub use subject::{
    assemble_xy, encode_subject, EncodingReport, ParcelResult, DEFAULT_LAMBDA_GRID,
};
