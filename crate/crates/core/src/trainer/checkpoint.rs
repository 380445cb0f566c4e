//! Binary checkpoints.
//!
//! Every file starts with the magic `CARRL1` and a role tag. Policy files
//! (`RTRA`, `REA`) hold only what evaluation needs; `TRAIN` files hold the
//! complete resumable training state. Integers and floats are little-endian.

use std::path::Path;

use crate::diffnet::{decode_params, encode_params, Activation, Mlp, NetSpec, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::rea::AdvNets;
use crate::rng::StreamState;
use crate::rtra::{DefenderActor, Ring, Transition};
use crate::simenv::{EgoObservation, OBS_DIM};

pub use crate::diffnet::MAGIC;

pub const ROLE_DEFENDER: &str = "RTRA";
pub const ROLE_ADVERSARY: &str = "REA";
pub const ROLE_TRAINING: &str = "TRAIN";

#[derive(Debug, Default)]
pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn new(role: &str) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.str(role);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn net(&mut self, net: &Mlp) {
        self.u8(net.spec().activation().code());
        self.bytes(&encode_params(net.spec(), net.params()));
    }

    pub fn optimizer(&mut self, opt: &Optimizer) {
        self.u8(match opt.kind() {
            OptimizerKind::Adam => 0,
            OptimizerKind::RmsProp => 1,
        });
        let (step, state) = opt.state();
        self.u64(step);
        self.f64s(&state);
    }

    pub fn rng(&mut self, s: &StreamState) {
        self.0.extend_from_slice(&s.key);
        self.u64(s.stream_id);
        self.u128(s.word_pos);
    }

    fn obs(&mut self, o: &EgoObservation) {
        for v in o.as_slice() {
            self.f64(*v);
        }
    }

    pub fn ring(&mut self, r: &Ring) {
        self.u64(r.capacity() as u64);
        self.u64(r.len() as u64);
        for t in r.iter() {
            self.obs(&t.s_tilde);
            self.obs(&t.s);
            self.f64(t.action);
            self.f64(t.reward);
            self.obs(&t.s_next);
            self.bool(t.done);
            self.bool(t.attacked);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and role tag.
    pub fn new(buf: &'a [u8], role: &str) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("bad magic: not a checkpoint file"));
        }
        let found = r.string()?;
        if found != role {
            return Err(Error::format(format!("expected a {role} checkpoint, found {found:?}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(format!("bad boolean byte {b}"))),
        }
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::format("length prefix exceeds file size"));
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::format("invalid UTF-8 string"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn net(&mut self) -> Result<Mlp> {
        let act = Activation::from_code(self.u8()?)?;
        let blob = self.bytes()?;
        let (widths, params, used) = decode_params(blob)?;
        if used != blob.len() {
            return Err(Error::format("trailing bytes in parameter block"));
        }
        Mlp::new(NetSpec::new(widths, act)?, params)
    }

    pub fn optimizer(&mut self, lr: f64) -> Result<Optimizer> {
        let kind = match self.u8()? {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::RmsProp,
            b => return Err(Error::format(format!("unknown optimizer code {b}"))),
        };
        let step = self.u64()?;
        let state = self.f64s()?;
        let len = match kind {
            OptimizerKind::Adam => state.len() / 2,
            OptimizerKind::RmsProp => state.len(),
        };
        let mut opt = Optimizer::new(kind, len, lr);
        opt.set_state(step, &state).map_err(Error::Format)?;
        Ok(opt)
    }

    pub fn rng(&mut self) -> Result<StreamState> {
        let key: [u8; 32] = self.take(32)?.try_into().expect("32 bytes");
        Ok(StreamState {
            key,
            stream_id: self.u64()?,
            word_pos: self.u128()?,
        })
    }

    fn obs(&mut self) -> Result<EgoObservation> {
        let mut o = [0.0; OBS_DIM];
        for v in &mut o {
            *v = self.f64()?;
        }
        Ok(EgoObservation(o))
    }

    pub fn ring(&mut self) -> Result<Ring> {
        let cap = self.u64()? as usize;
        if cap == 0 {
            return Err(Error::format("zero ring capacity"));
        }
        let n = self.len(3 * OBS_DIM * 8 + 18)?;
        let mut ring = Ring::new(cap);
        for _ in 0..n {
            let s_tilde = self.obs()?;
            let s = self.obs()?;
            let action = self.f64()?;
            let reward = self.f64()?;
            let s_next = self.obs()?;
            let done = self.bool()?;
            let attacked = self.bool()?;
            ring.push(Transition {
                s_tilde,
                s,
                action,
                reward,
                s_next,
                done,
                attacked,
            });
        }
        Ok(ring)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(())
    }
}

/// Re-attaches named output heads, which the parameter format omits.
pub(crate) fn with_heads(net: Mlp, heads: &[(&str, usize, usize)]) -> Result<Mlp> {
    let mut spec = net.spec().clone();
    for &(name, start, len) in heads {
        spec = spec.with_head(name, start, len).map_err(|e| Error::format(e.to_string()))?;
    }
    Mlp::new(spec, net.params().clone())
}

pub(crate) const DEFENDER_HEADS: &[(&str, usize, usize)] = &[("action", 0, 2)];
pub(crate) const ADVERSARY_HEADS: &[(&str, usize, usize)] = &[("trigger", 0, 2), ("target", 2, 2)];

/// Policy-only defender file.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenderFile {
    pub actor: DefenderActor,
    pub q1: Mlp,
    pub q2: Mlp,
    pub lambda: f64,
    pub alpha: f64,
}

pub fn encode_defender(f: &DefenderFile) -> Vec<u8> {
    let mut w = Writer::new(ROLE_DEFENDER);
    w.net(&f.actor.0);
    w.net(&f.q1);
    w.net(&f.q2);
    w.f64(f.lambda);
    w.f64(f.alpha);
    w.0
}

pub fn decode_defender(bytes: &[u8]) -> Result<DefenderFile> {
    let mut r = Reader::new(bytes, ROLE_DEFENDER)?;
    let actor = r.net()?;
    if actor.spec().input_width() != OBS_DIM || actor.spec().output_width() != 2 {
        return Err(Error::format("defender actor has the wrong shape"));
    }
    let f = DefenderFile {
        actor: DefenderActor(with_heads(actor, DEFENDER_HEADS)?),
        q1: r.net()?,
        q2: r.net()?,
        lambda: r.f64()?,
        alpha: r.f64()?,
    };
    r.finish()?;
    Ok(f)
}

pub fn encode_adversary(nets: &AdvNets) -> Vec<u8> {
    let mut w = Writer::new(ROLE_ADVERSARY);
    w.net(&nets.actor);
    w.net(&nets.critic);
    w.0
}

pub fn decode_adversary(bytes: &[u8]) -> Result<AdvNets> {
    let mut r = Reader::new(bytes, ROLE_ADVERSARY)?;
    let nets = AdvNets {
        actor: with_heads(r.net()?, ADVERSARY_HEADS)?,
        critic: r.net()?,
    };
    r.finish()?;
    if nets.actor.spec().input_width() != crate::rea::ADV_OBS_DIM || nets.actor.spec().output_width() != 4 {
        return Err(Error::format("adversary actor has the wrong shape"));
    }
    Ok(nets)
}

pub fn save_defender(path: &Path, f: &DefenderFile) -> Result<()> {
    std::fs::write(path, encode_defender(f))?;
    Ok(())
}

pub fn load_defender(path: &Path) -> Result<DefenderFile> {
    decode_defender(&std::fs::read(path)?)
}

pub fn save_adversary(path: &Path, nets: &AdvNets) -> Result<()> {
    std::fs::write(path, encode_adversary(nets))?;
    Ok(())
}

pub fn load_adversary(path: &Path) -> Result<AdvNets> {
    decode_adversary(&std::fs::read(path)?)
}
