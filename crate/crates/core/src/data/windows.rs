use crate::error::Result;
use crate::tensor::Tensor;

/// An input window and the frames that immediately follow it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `[T, S, M]`
    pub input: Tensor,
    /// `[horizon, S, M]`
    pub target: Tensor,
    /// Index of the first input frame in the source sequence.
    pub start: usize,
}

/// Number of windows [`make_windows`] produces.
pub fn window_count(len: usize, window: usize, horizon: usize, stride: usize) -> usize {
    if len < window + horizon || stride == 0 {
        0
    } else {
        (len - window - horizon) / stride + 1
    }
}

/// Slides over `frames: [N, S, M]` with the given stride. Windows never
/// leave the sequence; a sequence shorter than `window + horizon` yields
/// nothing.
pub fn make_windows(frames: &Tensor, window: usize, horizon: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    let len = frames.shape()[0];
    let count = window_count(len, window, horizon, stride);
    if count == 0 {
        log::warn!(
            "sequence of {len} frames is too short for window {window} + horizon {horizon}"
        );
        return Ok(Vec::new());
    }
    (0..count)
        .map(|i| {
            let start = i * stride;
            Ok(WindowedSample {
                input: frames.slice_leading(start, start + window)?,
                target: frames.slice_leading(start + window, start + window + horizon)?,
                start,
            })
        })
        .collect()
}
