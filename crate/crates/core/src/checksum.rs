use crc::{Crc, CRC_64_XZ};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Incremental variant for data spread over several pages.
pub struct Checksummer(crc::Digest<'static, u64>);

impl Checksummer {
    pub fn new() -> Checksummer {
        Checksummer(CRC64.digest())
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> u64 {
        self.0.finalize()
    }
}

impl Default for Checksummer {
    fn default() -> Self {
        Checksummer::new()
    }
}
