//! Binary model files.
//!
//! A checkpoint is `GFCK`, a u16 version, a header describing the network
//! and the generative formulation, then every parameter tensor as
//! little-endian f32 in declaration order, followed by the EMA tensors.
//! The resumable training state (`GFST`) stores the same header and the
//! full-precision weights, EMA and optimizer moments.

use std::io::{Read, Write};

use super::{HeadKind, ModelParams, NetConfig, TrainState};
use crate::error::{GeoError, Result};
use crate::gen::Formulation;
use crate::sched::{Scheduler, SchedulerKind};

const CKPT_MAGIC: &[u8; 4] = b"GFCK";
const STATE_MAGIC: &[u8; 4] = b"GFST";
const VERSION: u16 = 1;
const NO_FORMULATION: u8 = 0xff;

/// What the network was trained to predict, beyond its shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelTag {
    /// `None` for baseline heads.
    pub formulation: Option<Formulation>,
    pub sched: Scheduler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: ModelTag,
    pub params: ModelParams,
    pub ema: ModelParams,
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], tag: &ModelTag, cfg: &NetConfig) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (head, comps): (u8, u16) = match cfg.head {
        HeadKind::Field => (0, 0),
        HeadKind::Vmf => (1, 1),
        HeadKind::VmfMixture { components } => (2, components as u16),
    };
    w.write_all(&[head])?;
    w.write_all(&comps.to_le_bytes())?;
    w.write_all(&[tag.formulation.map_or(NO_FORMULATION, Formulation::code)])?;
    w.write_all(&[tag.sched.kind.code()])?;
    w.write_all(&tag.sched.alpha.to_le_bytes())?;
    w.write_all(&tag.sched.beta.to_le_bytes())?;
    for v in [cfg.width, cfg.n_blocks, cfg.cond_dim] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => GeoError::Format("file truncated".into()),
        _ => GeoError::Io(e),
    })?;
    Ok(b)
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(ModelTag, NetConfig)> {
    let m: [u8; 4] = read_array(r)?;
    if &m != magic {
        return Err(GeoError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(GeoError::Format(format!("unsupported version {version}")));
    }
    let [head] = read_array::<1, _>(r)?;
    let comps = u16::from_le_bytes(read_array(r)?) as usize;
    let head = match head {
        0 => HeadKind::Field,
        1 => HeadKind::Vmf,
        2 => HeadKind::VmfMixture { components: comps },
        h => return Err(GeoError::Format(format!("unknown head tag {h}"))),
    };
    let [form] = read_array::<1, _>(r)?;
    let formulation = match form {
        NO_FORMULATION => None,
        c => Some(Formulation::from_code(c).ok_or_else(|| GeoError::Format(format!("unknown formulation tag {c}")))?),
    };
    let [kind] = read_array::<1, _>(r)?;
    let kind = SchedulerKind::from_code(kind).ok_or_else(|| GeoError::Format(format!("unknown scheduler tag {kind}")))?;
    let alpha = f64::from_le_bytes(read_array(r)?);
    let beta = f64::from_le_bytes(read_array(r)?);
    let sched = Scheduler::new(kind, alpha, beta).map_err(|e| GeoError::Format(e.to_string()))?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(read_array(r)?) as usize;
    }
    let cfg = NetConfig {
        width: dims[0],
        n_blocks: dims[1],
        cond_dim: dims[2],
        head,
    };
    cfg.validate().map_err(|e| GeoError::Format(e.to_string()))?;
    if cfg.width > 1 << 14 || cfg.n_blocks > 1 << 10 || cfg.cond_dim > 1 << 20 {
        return Err(GeoError::Format(format!("implausible network size {cfg:?}")));
    }
    Ok((ModelTag { formulation, sched }, cfg))
}

fn write_f32<W: Write>(w: &mut W, p: &ModelParams) -> Result<()> {
    let mut buf = Vec::with_capacity(4 * p.num_params());
    for t in p.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32<R: Read>(r: &mut R, cfg: NetConfig) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(cfg);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(read_array(r)?) as f64;
        }
    }
    Ok(p)
}

fn write_f64<W: Write>(w: &mut W, p: &ModelParams) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * p.num_params());
    for t in p.tensors() {
        for &v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64<R: Read>(r: &mut R, cfg: NetConfig) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(cfg);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(read_array(r)?);
        }
    }
    Ok(p)
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(GeoError::Format("trailing bytes after tensors".into())),
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    write_header(&mut w, CKPT_MAGIC, &ck.tag, &ck.params.config)?;
    write_f32(&mut w, &ck.params)?;
    write_f32(&mut w, &ck.ema)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let (tag, cfg) = read_header(&mut r, CKPT_MAGIC)?;
    let params = read_f32(&mut r, cfg)?;
    let ema = read_f32(&mut r, cfg)?;
    expect_eof(&mut r)?;
    Ok(Checkpoint { tag, params, ema })
}

pub fn write_train_state<W: Write>(mut w: W, tag: &ModelTag, ts: &TrainState) -> Result<()> {
    write_header(&mut w, STATE_MAGIC, tag, &ts.params.config)?;
    w.write_all(&ts.step.to_le_bytes())?;
    for p in [&ts.params, &ts.ema, &ts.m, &ts.v] {
        write_f64(&mut w, p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_state<R: Read>(mut r: R) -> Result<(ModelTag, TrainState)> {
    let (tag, cfg) = read_header(&mut r, STATE_MAGIC)?;
    let step = u64::from_le_bytes(read_array(&mut r)?);
    let params = read_f64(&mut r, cfg)?;
    let ema = read_f64(&mut r, cfg)?;
    let m = read_f64(&mut r, cfg)?;
    let v = read_f64(&mut r, cfg)?;
    expect_eof(&mut r)?;
    Ok((tag, TrainState { params, ema, m, v, step }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(head: HeadKind) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NetConfig::new(8, 2, 5).with_head(head);
        let mut params = ModelParams::init(cfg, &mut rng).unwrap();
        params.randomize(1.0, &mut rng);
        let mut ema = params.clone();
        ema.randomize(1.0, &mut rng);
        Checkpoint {
            tag: ModelTag {
                formulation: Some(Formulation::RfmS2),
                sched: Scheduler::standard_sigmoid(),
            },
            params,
            ema,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        for head in [HeadKind::Field, HeadKind::Vmf, HeadKind::VmfMixture { components: 3 }] {
            let ck = sample(head);
            let mut a = Vec::new();
            write_checkpoint(&mut a, &ck).unwrap();
            let back = read_checkpoint(a.as_slice()).unwrap();
            assert_eq!(back.tag, ck.tag);
            assert_eq!(back.params.config, ck.params.config);
            let mut b = Vec::new();
            write_checkpoint(&mut b, &back).unwrap();
            assert_eq!(a, b);
            // reading again is idempotent on values
            assert_eq!(read_checkpoint(b.as_slice()).unwrap(), back);
        }
    }

    #[test]
    fn header_layout() {
        let ck = sample(HeadKind::Field);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &ck).unwrap();
        assert_eq!(&a[..4], b"GFCK");
        assert_eq!(u16::from_le_bytes([a[4], a[5]]), 1);
        let header = 4 + 2 + 1 + 2 + 1 + 1 + 8 + 8 + 12;
        assert_eq!(a.len(), header + 2 * 4 * ck.params.num_params());
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample(HeadKind::Field);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &ck).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(GeoError::Format(_))));
        assert!(matches!(read_checkpoint(&a[..a.len() - 3]), Err(GeoError::Format(_))));
        let mut long = a.clone();
        long.push(0);
        assert!(matches!(read_checkpoint(long.as_slice()), Err(GeoError::Format(_))));
    }

    #[test]
    fn train_state_round_trip() {
        let ck = sample(HeadKind::Field);
        let mut ts = TrainState::new(ck.params.clone());
        ts.step = 1234;
        ts.m.randomize(0.1, &mut ChaCha8Rng::seed_from_u64(2));
        let mut buf = Vec::new();
        write_train_state(&mut buf, &ck.tag, &ts).unwrap();
        let (tag, back) = read_train_state(buf.as_slice()).unwrap();
        assert_eq!(tag, ck.tag);
        assert_eq!(back, ts);
    }
}
