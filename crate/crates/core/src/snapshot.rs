//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "HSC1" version:u32 n:u32 L:f64 t:f64 rank:u32 sign:i8
//! rank × (λ:f64, n³ × (re:f64, im:f64))          position space, row-major
//! [count:u32, count × (kx:f64, ky:f64, kz:f64, Ψ:f64)]
//! ["PSX1" t1:f64 stride:u32 count × valid:u8 count × (direct:f64, asymptotic:f64)]
//! ```
//!
//! The phase block and its trailer are present together or not at all.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::ensemble::{Interaction, OrbitalEnsemble};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, Space};
use crate::scattering::PhaseState;

pub const MAGIC: &[u8; 4] = b"HSC1";
pub const PHASE_MAGIC: &[u8; 4] = b"PSX1";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub ensemble: OrbitalEnsemble,
    pub phase: Option<PhaseState>,
}

impl Snapshot {
    pub fn new(ensemble: OrbitalEnsemble) -> Self {
        Snapshot {
            ensemble,
            phase: None,
        }
    }

    pub fn with_phase(mut self, phase: PhaseState) -> Self {
        self.phase = Some(phase);
        self
    }

    pub fn time(&self) -> f64 {
        self.ensemble.time()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let e = &self.ensemble;
        let g = e.grid();
        let mut out = Vec::with_capacity(64 + e.rank() * (8 + 16 * g.len()));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, g.n() as u32);
        put_f64(&mut out, g.length());
        put_f64(&mut out, e.time());
        put_u32(&mut out, e.rank() as u32);
        out.push(e.interaction().sign() as i8 as u8);
        let pos = e.orbitals_in(Space::Position);
        for (lambda, u) in e.occupations().iter().zip(pos.iter()) {
            put_f64(&mut out, *lambda);
            for z in u.values() {
                put_f64(&mut out, z.re);
                put_f64(&mut out, z.im);
            }
        }
        if let Some(phase) = &self.phase {
            let lattice = phase.lattice();
            put_u32(&mut out, lattice.len() as u32);
            for (p, psi) in phase.values().iter().enumerate() {
                for k in lattice.wavevector(phase.grid(), p) {
                    put_f64(&mut out, k);
                }
                put_f64(&mut out, *psi);
            }
            out.extend_from_slice(PHASE_MAGIC);
            put_f64(&mut out, phase.switch_time());
            put_u32(&mut out, lattice.stride() as u32);
            out.extend(phase.validity().iter().map(|&v| v as u8));
            let (direct, asymptotic) = phase.overlap();
            for (a, b) in direct.iter().zip(asymptotic) {
                put_f64(&mut out, *a);
                put_f64(&mut out, *b);
            }
        }
        w.write_all(&out).map_err(|e| Error::Snapshot(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Snapshot(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let n = c.u32()? as usize;
        let length = c.f64()?;
        let grid = GridSpec::new(n, length).map_err(|e| Error::Snapshot(e.to_string()))?;
        let t = c.f64()?;
        let rank = c.u32()? as usize;
        let interaction = Interaction::from_sign(c.take(1)?[0] as i8 as i64)
            .map_err(|e| Error::Snapshot(e.to_string()))?;
        let mut occupations = Vec::with_capacity(rank);
        let mut orbitals = Vec::with_capacity(rank);
        for _ in 0..rank {
            occupations.push(c.f64()?);
            let raw = c.take(16 * grid.len())?;
            let values = raw
                .chunks_exact(16)
                .map(|b| Complex64::new(f64_at(&b[..8]), f64_at(&b[8..])))
                .collect();
            orbitals.push(ScalarField::from_values(grid, Space::Position, values)?);
        }
        let ensemble = OrbitalEnsemble::new(t, occupations, orbitals, interaction)
            .map_err(|e| Error::Snapshot(e.to_string()))?;
        let snap = Snapshot::new(ensemble);
        if c.remaining() == 0 {
            return Ok(snap);
        }

        let count = c.u32()? as usize;
        let block = c.take(32 * count)?;
        if c.take(4)? != PHASE_MAGIC {
            return Err(Error::Snapshot("phase block without trailer".into()));
        }
        let t1 = c.f64()?;
        let stride = c.u32()? as usize;
        if stride == 0 {
            return Err(Error::Snapshot("zero sample stride".into()));
        }
        let valid = c.take(count)?.iter().map(|&b| b != 0).collect();
        let mut direct = Vec::with_capacity(count);
        let mut asymptotic = Vec::with_capacity(count);
        for _ in 0..count {
            direct.push(c.f64()?);
            asymptotic.push(c.f64()?);
        }
        let psi: Vec<f64> = block.chunks_exact(32).map(|b| f64_at(&b[24..])).collect();
        let phase = PhaseState::from_parts((grid, stride), t, t1, psi, valid, (direct, asymptotic))?;
        for (p, rec) in block.chunks_exact(32).enumerate() {
            let k = phase.lattice().wavevector(&grid, p);
            for a in 0..3 {
                if f64_at(&rec[8 * a..8 * a + 8]).to_bits() != k[a].to_bits() {
                    return Err(Error::Snapshot(format!("sample {p} is off the lattice")));
                }
            }
        }
        if c.remaining() != 0 {
            return Err(Error::Snapshot(format!("{} trailing bytes", c.remaining())));
        }
        Ok(snap.with_phase(phase))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn f64_at(b: &[u8]) -> f64 {
    f64::from_le_bytes(b.try_into().expect("8 bytes"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Snapshot(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64_at(self.take(8)?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::to_frequency;
    use crate::oracle::{gaussian_ensemble, GaussianSpec};

    fn ensemble() -> OrbitalEnsemble {
        let grid = GridSpec::new(8, 10.0).unwrap();
        let specs = [
            GaussianSpec {
                occupation: 0.3,
                center: [0.5, 0.0, 0.0],
                width: 1.0,
                boost: [0.2, 0.0, 0.1],
            },
            GaussianSpec {
                occupation: 0.1,
                center: [0.0, -1.0, 0.0],
                width: 1.3,
                boost: [0.0; 3],
            },
        ];
        gaussian_ensemble(&grid, &specs, Interaction::Attractive).unwrap()
    }

    fn phase(e: &OrbitalEnsemble) -> PhaseState {
        let mut p = PhaseState::with_stride(*e.grid(), e.time(), 1.0, 1);
        let g: Vec<f64> = (0..p.lattice().len()).map(|i| 0.01 * i as f64).collect();
        p.accumulate_asymptotic(&g, -1.0, e.time(), 0.25).unwrap();
        p
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let e = ensemble();
        let bytes = Snapshot::new(e.clone()).to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Snapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.ensemble.occupations(), e.occupations());
        assert_eq!(back.ensemble.interaction(), Interaction::Attractive);
        assert!(back.phase.is_none());
        let header = 4 + 4 + 4 + 8 + 8 + 4 + 1;
        assert_eq!(bytes.len(), header + 2 * (8 + 16 * 512));
    }

    #[test]
    fn frequency_space_orbitals_are_stored_in_position_space() {
        let e = ensemble();
        let freq = OrbitalEnsemble::new(
            e.time(),
            e.occupations().to_vec(),
            e.orbitals().iter().map(|u| to_frequency(u).unwrap()).collect(),
            e.interaction(),
        )
        .unwrap();
        let a = Snapshot::from_bytes(&Snapshot::new(freq).to_bytes()).unwrap();
        for (u, v) in a.ensemble.orbitals().iter().zip(e.orbitals()) {
            assert_eq!(u.space(), Space::Position);
            for (x, y) in u.values().iter().zip(v.values()) {
                assert!((x - y).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn phase_round_trip() {
        let mut e = ensemble();
        e.set_time(0.25);
        let mut start = ensemble();
        start.set_time(0.0);
        let p = phase(&start);
        let snap = Snapshot::new(e).with_phase(p.clone());
        let bytes = snap.to_bytes();
        let back = Snapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back.phase.as_ref(), Some(&p));
        assert_eq!(back.to_bytes(), bytes);
        let len = p.lattice().len();
        assert_eq!(bytes.len(), Snapshot::new(back.ensemble).to_bytes().len() + 20 + 49 * len);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Snapshot::new(ensemble()).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Snapshot::from_bytes(&bad), Err(Error::Snapshot(_))));
        assert!(matches!(Snapshot::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Snapshot(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Snapshot::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Snapshot::from_bytes(&extra).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hsc");
        let snap = Snapshot::new(ensemble());
        snap.save(&path).unwrap();
        assert_eq!(Snapshot::load(&path).unwrap().to_bytes(), snap.to_bytes());
        assert!(matches!(Snapshot::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
