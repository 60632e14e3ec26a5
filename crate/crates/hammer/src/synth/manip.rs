//! The four manipulation operators. Image operators locate faces directly
//! from pixels (exact on clean renders) and edit them in place; text
//! operators rewrite template slots and annotate the changed tokens.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{ManipType, MediaPair};

use super::decode::{decode_image, DetectedFace};
use super::render::{identity_rgb, mouth_pixels, FacePatch, MOUTH_VALUE};
use super::{TextSemantics, WorldSpec};

#[derive(Debug, Error)]
pub enum ManipError {
    #[error("no face present in image")]
    NoFace,
    #[error("donor identity {0} equals the target face identity")]
    DegenerateSwap(usize),
    #[error("image modality already manipulated")]
    ImageNotPristine,
    #[error("text modality already manipulated")]
    TextNotPristine,
    #[error("no retrieval candidate with matching name and different semantics")]
    NoCandidate,
    #[error("text has no emotion verb")]
    NoEmotionVerb,
    #[error("text does not follow the world grammar")]
    BadGrammar,
}

fn require_image_pristine(pair: &MediaPair) -> Result<(), ManipError> {
    if pair.has_manip(ManipType::FaceSwap) || pair.has_manip(ManipType::FaceAttribute) {
        return Err(ManipError::ImageNotPristine);
    }
    Ok(())
}

fn require_text_pristine(pair: &MediaPair) -> Result<(), ManipError> {
    if pair.has_manip(ManipType::TextSwap) || pair.has_manip(ManipType::TextAttribute) {
        return Err(ManipError::TextNotPristine);
    }
    Ok(())
}

fn largest_face(spec: &WorldSpec, pair: &MediaPair) -> Result<DetectedFace, ManipError> {
    let decoded = decode_image(spec, &pair.image).ok_or(ManipError::NoFace)?;
    Ok(decoded.largest().clone())
}

/// Face swap: recolor the largest face's disc to the donor identity hue.
/// The mouth glyph (dark, unsaturated) is untouched, so emotion survives.
pub fn apply_fs(
    spec: &WorldSpec,
    pair: &MediaPair,
    donor_identity: usize,
) -> Result<MediaPair, ManipError> {
    require_image_pristine(pair)?;
    let face = largest_face(spec, pair)?;
    if donor_identity == face.identity {
        return Err(ManipError::DegenerateSwap(donor_identity));
    }

    let mut out = pair.clone();
    let rgb = identity_rgb(spec, donor_identity);
    for &(y, x) in &face.pixels {
        out.image.set_pixel(y, x, rgb);
    }
    let patch = FacePatch {
        cx: face.cx,
        cy: face.cy,
        radius: face.radius,
        identity: donor_identity,
        positive: face.positive,
    };
    out.y_bin = 1;
    out.y_mul[ManipType::FaceSwap.index()] = 1;
    out.y_box = patch.bbox(spec.image_size);
    Ok(out)
}

/// Face attribute edit: flip the largest face's mouth polarity in place.
/// Identity hue is preserved; applying the operator twice restores the
/// original pixels exactly.
pub fn apply_fa(spec: &WorldSpec, pair: &MediaPair) -> Result<MediaPair, ManipError> {
    require_image_pristine(pair)?;
    let face = largest_face(spec, pair)?;

    let mut out = pair.clone();
    let hue_rgb = identity_rgb(spec, face.identity);
    // erase the current mouth: dark pixels inside the face extent
    let (x_min, y_min, x_max, y_max) = face.extent;
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            let p = out.image.pixel(y, x);
            let value = p[0].max(p[1]).max(p[2]);
            if value < 0.3 {
                out.image.set_pixel(y, x, hue_rgb);
            }
        }
    }
    let flipped = FacePatch {
        cx: face.cx,
        cy: face.cy,
        radius: face.radius,
        identity: face.identity,
        positive: !face.positive,
    };
    for (y, x) in mouth_pixels(&flipped) {
        if y < out.image.height && x < out.image.width {
            out.image.set_pixel(y, x, [MOUTH_VALUE; 3]);
        }
    }
    out.y_bin = 1;
    out.y_mul[ManipType::FaceAttribute.index()] = 1;
    out.y_box = flipped.bbox(spec.image_size);
    Ok(out)
}

/// Text swap: replace every non-name content token (verb, scene, date) with
/// those of a retrieved same-name sample whose scene and emotion both
/// differ. Changed tokens are annotated fake; the name keeps its label.
pub fn apply_ts(
    spec: &WorldSpec,
    pair: &MediaPair,
    corpus: &[MediaPair],
    seed: u64,
) -> Result<MediaPair, ManipError> {
    require_text_pristine(pair)?;
    let vocab = spec.vocab();
    let anchor = TextSemantics::parse(&vocab, &pair.tokens).ok_or(ManipError::BadGrammar)?;

    let mut candidates: Vec<&MediaPair> = corpus
        .iter()
        .filter(|c| {
            if c.id == pair.id || c.y_bin != 0 {
                return false;
            }
            match TextSemantics::parse(&vocab, &c.tokens) {
                Some(sem) => {
                    sem.name_id == anchor.name_id
                        && sem.scene_id != anchor.scene_id
                        && sem.positive != anchor.positive
                }
                None => false,
            }
        })
        .collect();
    if candidates.is_empty() {
        return Err(ManipError::NoCandidate);
    }
    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = candidates[rng.gen_range(0..candidates.len())];
    let donor = TextSemantics::parse(&vocab, &chosen.tokens).expect("candidate grammar");

    let mut out = pair.clone();
    let mut tokens = pair.tokens.clone();
    let mut y_tok = vec![0u8; tokens.len()];
    for (pos, new_id) in [
        (TextSemantics::VERB_POS, donor.verb_id),
        (TextSemantics::SCENE_POS, vocab.scene_token(donor.scene_id)),
        (TextSemantics::DATE_POS, vocab.date_token(donor.date_id)),
    ] {
        if tokens[pos] != new_id {
            tokens[pos] = new_id;
            y_tok[pos] = 1;
        }
    }
    out.tokens = tokens;
    out.y_tok = y_tok;
    out.y_bin = 1;
    out.y_mul[ManipType::TextSwap.index()] = 1;
    Ok(out)
}

/// Text attribute edit: swap the emotion verb for a random verb of the
/// opposite polarity. Exactly one token is annotated fake. `banned_texts`
/// lets the caller veto candidate outputs that would collide with existing
/// texts (cross-split deduplication).
pub fn apply_ta(
    spec: &WorldSpec,
    pair: &MediaPair,
    seed: u64,
    banned_texts: &dyn Fn(&[usize]) -> bool,
) -> Result<MediaPair, ManipError> {
    require_text_pristine(pair)?;
    let vocab = spec.vocab();
    let sem = TextSemantics::parse(&vocab, &pair.tokens).ok_or(ManipError::NoEmotionVerb)?;

    let mut pool = if sem.positive { vocab.negative_verbs() } else { vocab.positive_verbs() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    for verb in pool {
        let mut tokens = pair.tokens.clone();
        tokens[TextSemantics::VERB_POS] = verb;
        if banned_texts(&tokens) {
            continue;
        }
        let mut out = pair.clone();
        out.tokens = tokens;
        out.y_tok = vec![0u8; pair.tokens.len()];
        out.y_tok[TextSemantics::VERB_POS] = 1;
        out.y_bin = 1;
        out.y_mul[ManipType::TextAttribute.index()] = 1;
        return Ok(out);
    }
    Err(ManipError::NoCandidate)
}
