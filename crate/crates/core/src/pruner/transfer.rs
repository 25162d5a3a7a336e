use crate::budgets::NetworkShape;
use crate::datakit::Checkpoint;
use crate::error::{Error, Result};
use crate::models::{HardMask, MaskedNet};

/// Installs a mask learned on `host_shape` into `target`. The shapes must
/// agree layer by layer; classifier heads may differ.
pub fn install_mask(host_mask: &HardMask, host_shape: &NetworkShape, mut target: MaskedNet) -> Result<MaskedNet> {
    let diff = host_shape.diff(target.shape());
    if !diff.is_empty() {
        return Err(Error::ShapeMismatch(diff.join("; ")));
    }
    let fatal = target.validate_connectivity(host_mask)?;
    if !fatal.is_empty() {
        return Err(Error::FatalPruning { layers: fatal });
    }
    target.installed_mask = Some(host_mask.clone());
    Ok(target)
}

/// Installs the hard mask selected in `host` into `target`.
pub fn transfer_mask(host: &Checkpoint, target: MaskedNet) -> Result<MaskedNet> {
    let mask = host
        .hard_mask
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint carries no hard mask", host.stage)))?;
    install_mask(mask, &host.shape, target)
}
