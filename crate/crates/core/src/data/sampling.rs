use crate::error::{DfaError, Result};

/// `min(count, total)` uniformly spaced frame indices, `floor(k * total / count)`.
pub fn sample_frame_indices(total_frames: usize, count: usize) -> Result<Vec<usize>> {
    if total_frames == 0 || count == 0 {
        return Err(DfaError::InvalidArgument(format!(
            "total_frames ({total_frames}) and count ({count}) must be positive"
        )));
    }
    if count >= total_frames {
        return Ok((0..total_frames).collect());
    }
    Ok((0..count).map(|k| k * total_frames / count).collect())
}

/// Every `stride`-th frame starting at 0, capped at `max_count` when given.
pub fn stride_frame_indices(total_frames: usize, stride: usize, max_count: Option<usize>) -> Result<Vec<usize>> {
    if total_frames == 0 || stride == 0 {
        return Err(DfaError::InvalidArgument(format!(
            "total_frames ({total_frames}) and stride ({stride}) must be positive"
        )));
    }
    let it = (0..total_frames).step_by(stride);
    Ok(match max_count {
        Some(m) => it.take(m).collect(),
        None => it.collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(
            sample_frame_indices(320, 32).unwrap(),
            (0..32).map(|k| k * 10).collect::<Vec<_>>()
        );
        assert_eq!(sample_frame_indices(5, 32).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_frame_indices(100, 3).unwrap(), vec![0, 33, 66]);
    }

    #[test]
    fn zero_inputs_are_rejected() {
        assert!(matches!(sample_frame_indices(0, 3), Err(DfaError::InvalidArgument(_))));
        assert!(matches!(sample_frame_indices(3, 0), Err(DfaError::InvalidArgument(_))));
    }

    #[test]
    fn stride_mode() {
        assert_eq!(stride_frame_indices(25, 10, None).unwrap(), vec![0, 10, 20]);
        assert_eq!(stride_frame_indices(25, 5, Some(2)).unwrap(), vec![0, 5]);
    }
}
