use super::AnalyticsError;
use crate::saliency::{SaliencyMap, SaliencySource};
use crate::stimuli::BinaryMask;
use crate::trial::TrialRecord;

pub const RED: [u8; 3] = [255, 0, 0];
pub const YELLOW: [u8; 3] = [255, 255, 0];

/// `2|a ∧ b| / (|a| + |b|)`. Two empty masks count as identical (1.0).
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, AnalyticsError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(AnalyticsError::Shape(format!(
            "{}x{} vs {}x{} masks",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let both: usize = a
        .bits()
        .iter()
        .zip(b.bits())
        .map(|(x, y)| (x & y) as usize)
        .sum();
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Mean of the trials' click-disk fields as an unnormalized human-clicks map.
/// With `correct_only`, trials with a wrong choice are dropped first.
pub fn aggregate_click_attention(
    trials: &[&TrialRecord],
    radius: f64,
    correct_only: bool,
) -> Result<SaliencyMap, AnalyticsError> {
    let first = trials
        .first()
        .ok_or_else(|| AnalyticsError::Empty("no trials".into()))?;
    let (w, h) = (first.width as usize, first.height as usize);
    if let Some(t) = trials
        .iter()
        .find(|t| (t.width as usize, t.height as usize) != (w, h))
    {
        return Err(AnalyticsError::Shape(format!(
            "trial {} is {}x{}, expected {w}x{h}",
            t.stimulus_id, t.width, t.height
        )));
    }
    let kept: Vec<&&TrialRecord> = trials
        .iter()
        .filter(|t| !correct_only || t.correct)
        .collect();
    if kept.is_empty() {
        return Err(AnalyticsError::Empty("no correct trials".into()));
    }
    let mut acc = vec![0.0; w * h];
    for t in &kept {
        let field = t.click_mask(radius)?.field();
        for (a, &b) in acc.iter_mut().zip(field.bits()) {
            *a += b as f64;
        }
    }
    let n = kept.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    let class_index = first.true_label.index();
    Ok(SaliencyMap::raw(
        w,
        h,
        acc,
        SaliencySource::HumanClicks,
        class_index,
    )?)
}

/// Click positions colored from red (first) to yellow (last), linear in the
/// green channel with halves rounded up.
pub fn click_sequence_colors(trial: &TrialRecord) -> Vec<(u32, u32, [u8; 3])> {
    let n = trial.clicks.len();
    trial
        .clicks
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let green = if n < 2 {
                0
            } else {
                (510 * i + (n - 1)) / (2 * (n - 1))
            };
            (c.x, c.y, [255, green as u8, 0])
        })
        .collect()
}
