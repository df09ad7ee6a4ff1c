//! Reverse-mode differentiation for chain models, with byte and op accounting.

pub mod counters;
pub mod graph;
pub mod ledger;

pub use graph::{backward_graph, backward_graph_seeded, forward_graph, softmax_cross_entropy, Batch, Embedding, Gradients, LossKind, Model, OpKind, ParamGroup, ParamKind, Stage, StageGrad, Tape};
pub use ledger::{memory_report, ActivationLedger, Category, LayerSaved, MemoryReport};
