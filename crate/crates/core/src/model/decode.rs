use crate::error::{Error, Result};
use crate::model::{ForwardCtx, TransducerModel};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 10;

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous greedy transducer decoding.
///
/// At each frame the most likely symbol is emitted; a label advances the
/// prediction network and stays on the frame, a blank (or hitting the
/// per-frame cap) moves to the next frame.
pub fn greedy_decode<S: Scalar>(
    model: &TransducerModel<S>,
    features: &Tensor<S>,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    if max_symbols_per_frame == 0 {
        return Err(Error::Config(
            "max_symbols_per_frame must be at least 1".into(),
        ));
    }
    let ctx = ForwardCtx::eval();
    let blank = model.blank_id();
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, features, &ctx)?;
    let enc_proj = model.joint_encoder_projection(&mut tape, enc)?;
    let frames = tape.shape(enc_proj)[0];

    let state = model.initial_state(&mut tape)?;
    let (mut pred_out, mut state) = model.predict_step(&mut tape, blank, state, &ctx)?;
    let mut pred_proj = model.joint_prediction_projection(&mut tape, pred_out)?;
    let mut hyp = Vec::new();
    for t in 0..frames {
        let frame = tape.slice_rows(enc_proj, t, 1)?;
        let mut emitted = 0;
        while emitted < max_symbols_per_frame {
            let combined = tape.add(frame, pred_proj)?;
            let logits = model.joint_logits(&mut tape, combined, &ctx)?;
            let k = argmax(tape.value(logits).data());
            if k == blank {
                break;
            }
            hyp.push(k);
            (pred_out, state) = model.predict_step(&mut tape, k, state, &ctx)?;
            pred_proj = model.joint_prediction_projection(&mut tape, pred_out)?;
            emitted += 1;
        }
    }
    Ok(hyp)
}
