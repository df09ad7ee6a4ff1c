//! Exact byte accounting for one training run.

use crate::scalar::Scalar;

use super::counters::OpCounters;
use super::graph::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Parameters,
    Gradients,
    OptimizerStates,
    SavedActivations,
    TransientPeak,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Parameters,
        Category::Gradients,
        Category::OptimizerStates,
        Category::SavedActivations,
        Category::TransientPeak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Parameters => "parameters",
            Category::Gradients => "gradients",
            Category::OptimizerStates => "optimizer_states",
            Category::SavedActivations => "saved_activations",
            Category::TransientPeak => "transient_peak",
        }
    }
}

/// Per-layer extra activation saved by a reparameterized layer beyond its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSaved {
    pub stage: usize,
    pub extra_bytes: usize,
}

/// One signed increment at an accounting site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LedgerEvent {
    pub category: Category,
    pub delta: i64,
}

#[derive(Clone, Debug, Default)]
pub struct ActivationLedger {
    parameters: usize,
    gradients: usize,
    optimizer_states: usize,
    saved_activations: usize,
    saved_peak: usize,
    transient_peak: usize,
    layers: Vec<LayerSaved>,
    counters: OpCounters,
    forwards: u64,
    backwards: u64,
    events: Vec<LedgerEvent>,
}

impl ActivationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, category: Category, delta: i64) {
        self.events.push(LedgerEvent { category, delta });
    }

    fn set_static(&mut self, category: Category, bytes: usize) {
        let old = match category {
            Category::Parameters => std::mem::replace(&mut self.parameters, bytes),
            Category::Gradients => std::mem::replace(&mut self.gradients, bytes),
            Category::OptimizerStates => std::mem::replace(&mut self.optimizer_states, bytes),
            _ => unreachable!("dynamic category"),
        };
        self.push(category, bytes as i64 - old as i64);
    }

    /// Records the model's static footprint: all stored weights, one gradient
    /// per trainable parameter and `moments` optimizer arrays per trainable
    /// parameter (2 for AdamW).
    pub fn account_model<T: Scalar>(&mut self, model: &Model<T>, moments: usize) {
        let trainable = model.trainable_param_count() * T::BYTES;
        self.set_static(Category::Parameters, model.parameter_bytes());
        self.set_static(Category::Gradients, trainable);
        self.set_static(Category::OptimizerStates, moments * trainable);
    }

    pub(crate) fn record_forward(&mut self, saved_bytes: usize, layers: Vec<LayerSaved>) {
        self.saved_activations += saved_bytes;
        self.saved_peak = self.saved_activations;
        self.layers = layers;
        self.forwards += 1;
        self.push(Category::SavedActivations, saved_bytes as i64);
    }

    pub(crate) fn record_backward(&mut self, released: usize, transient_peak: usize, counters: OpCounters) {
        self.saved_activations -= released.min(self.saved_activations);
        self.push(Category::SavedActivations, -(released as i64));
        if transient_peak > self.transient_peak {
            self.push(Category::TransientPeak, (transient_peak - self.transient_peak) as i64);
            self.transient_peak = transient_peak;
        }
        self.counters = counters;
        self.backwards += 1;
    }

    /// Currently held saved activations (0 between steps).
    pub fn saved_activations(&self) -> usize {
        self.saved_activations
    }

    /// Saved activations held at the end of the last forward pass.
    pub fn saved_activations_peak(&self) -> usize {
        self.saved_peak
    }

    pub fn layers(&self) -> &[LayerSaved] {
        &self.layers
    }

    /// Counters from the most recent backward pass.
    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn total(&self, category: Category) -> usize {
        match category {
            Category::Parameters => self.parameters,
            Category::Gradients => self.gradients,
            Category::OptimizerStates => self.optimizer_states,
            Category::SavedActivations => self.saved_activations,
            Category::TransientPeak => self.transient_peak,
        }
    }

    pub fn steps(&self) -> (u64, u64) {
        (self.forwards, self.backwards)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    /// `(category, bytes)`; saved activations are the last forward's peak.
    pub categories: Vec<(Category, usize)>,
    pub layers: Vec<LayerSaved>,
    pub counters: OpCounters,
}

impl MemoryReport {
    pub fn bytes(&self, category: Category) -> usize {
        self.categories.iter().find(|(c, _)| *c == category).map_or(0, |(_, b)| *b)
    }

    /// `kind,name,bytes` rows, header first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,bytes\n");
        for (c, b) in &self.categories {
            s.push_str(&format!("category,{},{b}\n", c.name()));
        }
        for l in &self.layers {
            s.push_str(&format!("layer_saved,stage{},{}\n", l.stage, l.extra_bytes));
        }
        s
    }
}

pub fn memory_report(ledger: &ActivationLedger) -> MemoryReport {
    let categories = Category::ALL
        .iter()
        .map(|&c| {
            let b = if c == Category::SavedActivations { ledger.saved_peak } else { ledger.total(c) };
            (c, b)
        })
        .collect();
    MemoryReport {
        categories,
        layers: ledger.layers.clone(),
        counters: ledger.counters.clone(),
    }
}
