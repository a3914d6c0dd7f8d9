//! The trainable light-transport field.
//!
//! Per-view features feed a shared aggregation network whose outputs drive a
//! density head, a per-view transport head and a view-blending head. The
//! blended transport is relit by the target environment and the result is
//! composited along rays. Everything is differentiated by [`tape::Tape`].

pub mod adam;
pub mod features;
pub mod model;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use features::{feature_stats, view_features, PerViewFeature, PosEnc, SourceView, FEATURE_DIM};
pub use model::{
    aggregate_geometry, blend_transport, field_graph, field_query, predict_density,
    predict_transport_perview, prepare_rays, render_graph, render_view, Aggregation, FieldInput,
    FieldNodes, FieldSample, RayBatch, Rendering,
};
pub use params::{
    read_checkpoint, write_checkpoint, Architecture, BlendMode, NelfParams, TransportMode,
};
pub use tape::{Matrix, RayLayout, Tape, Var};
