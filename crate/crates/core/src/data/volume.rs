use std::fmt;

use crate::error::{Error, Result};

/// Histopathological cyst subtype, in label-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CystClass {
    Ipmn = 0,
    Mcn = 1,
    Scn = 2,
    Spt = 3,
}

pub const NUM_CLASSES: usize = 4;

impl CystClass {
    pub const ALL: [CystClass; NUM_CLASSES] = [CystClass::Ipmn, CystClass::Mcn, CystClass::Scn, CystClass::Spt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CystClass::Ipmn => "IPMN",
            CystClass::Mcn => "MCN",
            CystClass::Scn => "SCN",
            CystClass::Spt => "SPT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for CystClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A labeled 3-D scan: intensities `[D,H,W]` row-major and a same-shaped
/// binary pancreas mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub patient_id: String,
    pub label: CystClass,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub intensities: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Volume {
    pub fn new(
        patient_id: impl Into<String>,
        label: CystClass,
        dims: [usize; 3],
        intensities: Vec<f32>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        let v = Volume {
            patient_id: patient_id.into(),
            label,
            depth: dims[0],
            height: dims[1],
            width: dims[2],
            intensities,
            mask,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depth * self.height * self.width;
        if n == 0 {
            return Err(Error::Data(format!("volume {} has an empty extent", self.patient_id)));
        }
        if self.intensities.len() != n || self.mask.len() != n {
            return Err(Error::Data(format!(
                "volume {}: {}x{}x{} needs {n} voxels, got {} intensities and {} mask values",
                self.patient_id,
                self.depth,
                self.height,
                self.width,
                self.intensities.len(),
                self.mask.len()
            )));
        }
        if let Some(bad) = self.mask.iter().find(|&&m| m > 1) {
            return Err(Error::Data(format!(
                "volume {}: mask value {bad} is not 0/1",
                self.patient_id
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn mask_slice(&self, d: usize) -> &[u8] {
        &self.mask[d * self.slice_len()..(d + 1) * self.slice_len()]
    }

    pub fn intensity_slice(&self, d: usize) -> &[f32] {
        &self.intensities[d * self.slice_len()..(d + 1) * self.slice_len()]
    }

    pub fn mask_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}
