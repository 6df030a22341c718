use super::Volume;
use crate::error::{Error, Result};
use crate::modality::Modality;

/// Hounsfield window mapped onto `[0, 1]`.
pub const CT_WINDOW: (f32, f32) = (-1024.0, 3071.0);
pub const MR_SCALE: f32 = 3000.0;
/// SUV divisor.
pub const SUV_SCALE: f64 = 20.0;

/// Modality-specific intensity normalisation. PET input is decay-corrected
/// activity concentration in kBq/mL, converted to body-weight SUV first.
pub fn normalize_modality(vol: &Volume) -> Result<Volume> {
    if vol.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let mut out = vol.clone();
    match vol.modality {
        Modality::Ct => {
            let (lo, hi) = CT_WINDOW;
            out.data.iter_mut().for_each(|v| *v = (v.clamp(lo, hi) - lo) / (hi - lo));
        }
        Modality::Mr => out.data.iter_mut().for_each(|v| *v = (*v / MR_SCALE).max(0.0)),
        Modality::Pet => {
            let meta = vol.pet_meta.ok_or(Error::MissingPetMeta)?;
            if !(meta.injected_dose_mbq > 0.0) || !(meta.body_weight_kg > 0.0) {
                return Err(Error::Data(format!("PET dose {} MBq and weight {} kg must be positive", meta.injected_dose_mbq, meta.body_weight_kg)));
            }
            let per_kg = meta.injected_dose_mbq / meta.body_weight_kg;
            out.data.iter_mut().for_each(|v| *v = (*v as f64 / per_kg / SUV_SCALE) as f32);
        }
        Modality::Shared => return Err(Error::UnknownModality("SHARED is not an imaging modality".into())),
    }
    out.normalized = true;
    Ok(out)
}
