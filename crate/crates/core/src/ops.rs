//! Operation tallies for the complexity census.
//!
//! Allocators are generic over [`Ops`]. The hot path uses [`NoCount`], whose
//! methods compile to nothing; the benchmark passes an [`OpTally`].

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Mul,
    Div,
    Log,
    Exp,
    E1,
    Sqrt,
    Cbrt,
}

pub trait Ops {
    fn add(&mut self, op: Op, n: u64);

    #[inline]
    fn one(&mut self, op: Op) {
        self.add(op, 1);
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoCount;

impl Ops for NoCount {
    #[inline(always)]
    fn add(&mut self, _op: Op, _n: u64) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpTally {
    pub mul: u64,
    pub div: u64,
    pub log: u64,
    pub exp: u64,
    pub e1: u64,
    pub sqrt: u64,
    pub cbrt: u64,
}

impl Ops for OpTally {
    fn add(&mut self, op: Op, n: u64) {
        let slot = match op {
            Op::Mul => &mut self.mul,
            Op::Div => &mut self.div,
            Op::Log => &mut self.log,
            Op::Exp => &mut self.exp,
            Op::E1 => &mut self.e1,
            Op::Sqrt => &mut self.sqrt,
            Op::Cbrt => &mut self.cbrt,
        };
        *slot += n;
    }
}

impl OpTally {
    pub fn total(&self) -> u64 {
        self.mul + self.div + self.log + self.exp + self.e1 + self.sqrt + self.cbrt
    }

    pub fn saturating_sub(&self, other: &OpTally) -> OpTally {
        OpTally {
            mul: self.mul.saturating_sub(other.mul),
            div: self.div.saturating_sub(other.div),
            log: self.log.saturating_sub(other.log),
            exp: self.exp.saturating_sub(other.exp),
            e1: self.e1.saturating_sub(other.e1),
            sqrt: self.sqrt.saturating_sub(other.sqrt),
            cbrt: self.cbrt.saturating_sub(other.cbrt),
        }
    }
}

impl std::ops::AddAssign for OpTally {
    fn add_assign(&mut self, o: OpTally) {
        self.mul += o.mul;
        self.div += o.div;
        self.log += o.log;
        self.exp += o.exp;
        self.e1 += o.e1;
        self.sqrt += o.sqrt;
        self.cbrt += o.cbrt;
    }
}
