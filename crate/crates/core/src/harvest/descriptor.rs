//! 128-bit idle-resource descriptor and the per-SSD descriptor table.
//!
//! Bit layout, least significant first:
//!
//! | bits     | field         |
//! |----------|---------------|
//! | 0        | valid         |
//! | 1        | resource type (0 processor, 1 DRAM) |
//! | 2..10    | borrower id (0xFF unclaimed) |
//! | 10..42   | amount        |
//! | 42..106  | info          |
//! | 106..128 | reserved, zero |
//!
//! Processor amount packs borrower utilization in the high 16 bits and
//! lender utilization in the low 16, both in basis points. Processor info
//! packs the mapping directory address (high 32), borrower CQID and shadow
//! CQID. DRAM amount is lendable MB; DRAM info packs the segment list
//! header address (high 32) and the log page base address. Addresses are
//! region-relative offsets.

use crate::error::{Result, SimError};

pub const UNCLAIMED: u8 = 0xFF;
pub const TABLE_SLOTS: usize = 8;
pub const BP_MAX: u16 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ResourceType {
    Processor,
    Dram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub valid: bool,
    pub kind: ResourceType,
    pub borrower: u8,
    pub amount: u32,
    pub info: u64,
}

const RESERVED_MASK: u128 = !((1u128 << 106) - 1);

impl Descriptor {
    pub fn processor(lender_util_bp: u16, dir_addr: u32, borrower_cq: u16, shadow_cq: u16) -> Self {
        Self {
            valid: true,
            kind: ResourceType::Processor,
            borrower: UNCLAIMED,
            amount: u32::from(lender_util_bp),
            info: (u64::from(dir_addr) << 32) | (u64::from(borrower_cq) << 16) | u64::from(shadow_cq),
        }
    }

    pub fn dram(lendable_mb: u32, seg_list_addr: u32, log_base: u32) -> Self {
        Self {
            valid: true,
            kind: ResourceType::Dram,
            borrower: UNCLAIMED,
            amount: lendable_mb,
            info: (u64::from(seg_list_addr) << 32) | u64::from(log_base),
        }
    }

    pub fn encode(&self) -> u128 {
        let mut w = u128::from(self.valid);
        w |= u128::from(self.kind == ResourceType::Dram) << 1;
        w |= u128::from(self.borrower) << 2;
        w |= u128::from(self.amount) << 10;
        w |= u128::from(self.info) << 42;
        w
    }

    pub fn decode(w: u128) -> Result<Self> {
        if w & RESERVED_MASK != 0 {
            return Err(SimError::Config(format!("descriptor reserved bits set: {w:#034x}")));
        }
        Ok(Self {
            valid: w & 1 == 1,
            kind: if (w >> 1) & 1 == 1 {
                ResourceType::Dram
            } else {
                ResourceType::Processor
            },
            borrower: ((w >> 2) & 0xFF) as u8,
            amount: ((w >> 10) & 0xFFFF_FFFF) as u32,
            info: ((w >> 42) & u128::from(u64::MAX)) as u64,
        })
    }

    pub fn to_le_bytes(&self) -> [u8; 16] {
        self.encode().to_le_bytes()
    }

    pub fn from_le_bytes(b: [u8; 16]) -> Result<Self> {
        Self::decode(u128::from_le_bytes(b))
    }

    pub fn is_claimed(&self) -> bool {
        self.borrower != UNCLAIMED
    }

    pub fn borrower_util(&self) -> u16 {
        (self.amount >> 16) as u16
    }

    pub fn lender_util(&self) -> u16 {
        self.amount as u16
    }

    pub fn set_utils(&mut self, borrower_bp: u16, lender_bp: u16) {
        self.amount = (u32::from(borrower_bp) << 16) | u32::from(lender_bp);
    }

    pub fn dir_addr(&self) -> u32 {
        (self.info >> 32) as u32
    }

    pub fn borrower_cq(&self) -> u16 {
        (self.info >> 16) as u16
    }

    pub fn shadow_cq(&self) -> u16 {
        self.info as u16
    }

    pub fn set_borrower_cq(&mut self, cq: u16) {
        self.info = (self.info & !(0xFFFF << 16)) | (u64::from(cq) << 16);
    }

    pub fn seg_list_addr(&self) -> u32 {
        (self.info >> 32) as u32
    }

    pub fn log_base(&self) -> u32 {
        self.info as u32
    }
}

/// Fraction in [0,1] to basis points.
pub fn to_bp(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * f64::from(BP_MAX)).round() as u16
}

/// Claim through a compare-and-swap on the whole descriptor word: the swap
/// succeeds only if the stored word still shows a valid, unclaimed
/// descriptor identical to the one the searcher read.
pub fn claim(stored: &mut u128, seen: u128, borrower: u8) -> bool {
    if *stored != seen {
        return false;
    }
    let Ok(d) = Descriptor::decode(seen) else {
        return false;
    };
    if !d.valid || d.is_claimed() {
        return false;
    }
    let mut n = d;
    n.borrower = borrower;
    *stored = n.encode();
    true
}

/// The fixed-size table each SSD exposes on the fabric.
#[derive(Debug, Clone, Default)]
pub struct DescriptorTable {
    slots: [u128; TABLE_SLOTS],
}

impl DescriptorTable {
    pub fn slots(&self) -> &[u128; TABLE_SLOTS] {
        &self.slots
    }

    pub fn get(&self, i: usize) -> Descriptor {
        Descriptor::decode(self.slots[i]).expect("table holds encoded descriptors")
    }

    pub fn word_mut(&mut self, i: usize) -> &mut u128 {
        &mut self.slots[i]
    }

    /// Publish into the first invalid slot. `None` when the table is full
    /// and publication must be deferred.
    pub fn publish(&mut self, d: Descriptor) -> Option<usize> {
        let i = self.slots.iter().position(|&w| w & 1 == 0)?;
        self.slots[i] = d.encode();
        Some(i)
    }

    /// Lender withdraws: clear the valid bit.
    pub fn withdraw(&mut self, i: usize) {
        self.slots[i] &= !1;
    }

    /// Borrower releases: reset to unclaimed.
    pub fn release(&mut self, i: usize) {
        let mut d = self.get(i);
        d.borrower = UNCLAIMED;
        self.slots[i] = d.encode();
    }

    pub fn update(&mut self, i: usize, f: impl FnOnce(&mut Descriptor)) {
        let mut d = self.get(i);
        f(&mut d);
        self.slots[i] = d.encode();
    }

    pub fn valid_slots(&self) -> impl Iterator<Item = (usize, Descriptor)> + '_ {
        (0..TABLE_SLOTS).map(|i| (i, self.get(i))).filter(|(_, d)| d.valid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn any_desc() -> impl Strategy<Value = Descriptor> {
        (any::<bool>(), any::<bool>(), any::<u8>(), any::<u32>(), any::<u64>()).prop_map(|(v, k, b, a, i)| Descriptor {
            valid: v,
            kind: if k { ResourceType::Dram } else { ResourceType::Processor },
            borrower: b,
            amount: a,
            info: i,
        })
    }

    proptest! {
        #[test]
        fn codec_roundtrip(d in any_desc()) {
            let w = d.encode();
            prop_assert_eq!(w & RESERVED_MASK, 0);
            prop_assert_eq!(Descriptor::decode(w).unwrap(), d);
            prop_assert_eq!(Descriptor::from_le_bytes(d.to_le_bytes()).unwrap(), d);
        }
    }

    #[test]
    fn field_positions() {
        let d = Descriptor {
            valid: true,
            kind: ResourceType::Dram,
            borrower: 0xFF,
            amount: 512,
            info: 0,
        };
        assert_eq!(d.encode(), 1 | 2 | (0xFF << 2) | (512 << 10));
        let p = Descriptor::processor(2500, 0xDEAD_BEEF, 3, 7);
        assert_eq!(p.lender_util(), 2500);
        assert_eq!(p.dir_addr(), 0xDEAD_BEEF);
        assert_eq!((p.borrower_cq(), p.shadow_cq()), (3, 7));
        assert_eq!(p.kind, ResourceType::Processor);
        assert!(!p.is_claimed());
    }

    #[test]
    fn reserved_bits_rejected() {
        assert!(Descriptor::decode(1u128 << 110).is_err());
    }

    #[test]
    fn claim_once() {
        let mut t = DescriptorTable::default();
        let i = t.publish(Descriptor::dram(512, 0, 0)).unwrap();
        let seen = t.slots()[i];
        assert!(claim(t.word_mut(i), seen, 3));
        assert!(!claim(t.word_mut(i), seen, 4));
        assert_eq!(t.get(i).borrower, 3);
        t.release(i);
        assert_eq!(t.get(i).borrower, UNCLAIMED);
        assert!(t.get(i).valid);
    }

    #[test]
    fn withdrawn_descriptor_cannot_be_claimed() {
        let mut t = DescriptorTable::default();
        let i = t.publish(Descriptor::processor(100, 0, 0, 1)).unwrap();
        let seen = t.slots()[i];
        t.withdraw(i);
        assert!(!claim(t.word_mut(i), seen, 2));
        let now = t.slots()[i];
        assert!(!claim(t.word_mut(i), now, 2));
    }

    #[test]
    fn full_table_defers_publication() {
        let mut t = DescriptorTable::default();
        for _ in 0..TABLE_SLOTS {
            assert!(t.publish(Descriptor::dram(2, 0, 0)).is_some());
        }
        assert!(t.publish(Descriptor::dram(2, 0, 0)).is_none());
        t.withdraw(5);
        assert_eq!(t.publish(Descriptor::dram(2, 0, 0)), Some(5));
    }

    /// Every interleaving of up to three claimants over two descriptors,
    /// each claimant reading then swapping, yields at most one owner per
    /// descriptor.
    #[test]
    fn exhaustive_claim_interleavings() {
        // Step: (claimant, phase) where phase 0 = read slot, 1 = cas.
        fn explore(
            slots: &mut [u128; 2],
            seen: &mut [Option<(usize, u128)>; 3],
            done: &mut [bool; 3],
            owners: &mut Vec<(usize, u8)>,
            n: usize,
        ) {
            let mut progressed = false;
            for c in 0..n {
                if done[c] {
                    continue;
                }
                progressed = true;
                match seen[c] {
                    None => {
                        for s in 0..2 {
                            let old = seen[c];
                            seen[c] = Some((s, slots[s]));
                            explore(slots, seen, done, owners, n);
                            seen[c] = old;
                        }
                    }
                    Some((s, w)) => {
                        let before = *slots;
                        let ok = claim(&mut slots[s], w, c as u8);
                        done[c] = true;
                        if ok {
                            owners.push((s, c as u8));
                        }
                        explore(slots, seen, done, owners, n);
                        if ok {
                            owners.pop();
                        }
                        done[c] = false;
                        *slots = before;
                    }
                }
            }
            if !progressed {
                for s in 0..2 {
                    assert!(owners.iter().filter(|o| o.0 == s).count() <= 1);
                }
            }
        }
        for n in 1..=3 {
            let d = Descriptor::dram(4, 0, 0).encode();
            let mut slots = [d, d];
            explore(&mut slots, &mut [None; 3], &mut [false; 3], &mut Vec::new(), n);
        }
    }
}
