use crate::analysis::{aggregate_frame_attention, FrameAttentionMatrix};
use crate::error::Result;
use crate::layout::TokenLayout;
use crate::scalar::Scalar;

use super::AttentionTensor;

/// What a capture record keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaptureMode {
    /// Only the `F×F` frame aggregate, which bounds memory during sweeps.
    #[default]
    FrameAggregate,
    /// The full `S×S` post-softmax matrix.
    Full,
}

#[derive(Debug, Clone)]
pub enum CapturedAttention<T> {
    Full(AttentionTensor<T>),
    Frames(FrameAttentionMatrix),
}

#[derive(Debug, Clone)]
pub struct CaptureRecord<T> {
    /// 1-based sampling step.
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub attention: CapturedAttention<T>,
}

impl<T: Scalar> CaptureRecord<T> {
    /// The record's frame-level aggregate.
    pub fn frames(&self, layout: &TokenLayout) -> Result<FrameAttentionMatrix> {
        match &self.attention {
            CapturedAttention::Frames(m) => Ok(m.clone()),
            CapturedAttention::Full(a) => aggregate_frame_attention(a, layout),
        }
    }
}

/// Sink for post-softmax attention recorded during sampling.
///
/// A sink has a single writer; concurrent sampling runs need distinct sinks.
#[derive(Debug, Clone)]
pub struct AttentionCapture<T> {
    enabled: bool,
    mode: CaptureMode,
    layout: TokenLayout,
    total_steps: Option<usize>,
    records: Vec<CaptureRecord<T>>,
}

impl<T: Scalar> AttentionCapture<T> {
    pub fn new(layout: TokenLayout, mode: CaptureMode) -> Self {
        Self { enabled: true, mode, layout, total_steps: None, records: Vec::new() }
    }

    pub fn disabled(layout: TokenLayout) -> Self {
        Self { enabled: false, ..Self::new(layout, CaptureMode::FrameAggregate) }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn records(&self) -> &[CaptureRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of sampling steps of the run that filled the sink, if known.
    pub fn total_steps(&self) -> Option<usize> {
        self.total_steps
    }

    pub fn set_total_steps(&mut self, n: usize) {
        self.total_steps = Some(n);
    }

    /// Appends one record. Does nothing while the sink is disabled.
    pub fn capture_attention(&mut self, a: &AttentionTensor<T>, step: usize, layer: usize, head: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let attention = match self.mode {
            CaptureMode::Full => CapturedAttention::Full(a.clone()),
            CaptureMode::FrameAggregate => CapturedAttention::Frames(aggregate_frame_attention(a, &self.layout)?),
        };
        self.records.push(CaptureRecord { step, layer, head, attention });
        Ok(())
    }
}

/// Where in the network an attention call happens, plus the sink to write to.
pub struct CaptureSite<'a, T> {
    pub sink: &'a mut AttentionCapture<T>,
    pub step: usize,
    pub layer: usize,
}

impl<T: Scalar> CaptureSite<'_, T> {
    pub(crate) fn record(&mut self, head: usize, a: &AttentionTensor<T>) -> Result<()> {
        self.sink.capture_attention(a, self.step, self.layer, head)
    }
}
