use std::io::{Read, Write};

use super::model::{InitRecord, ModelConfig, ModelParams};
use super::{NnError, Tensor};
use crate::bytes::Cursor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RPNN";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<(), NnError> {
    let v = u32::try_from(v).map_err(|_| NnError::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<(), NnError> {
    put_u32(buf, bytes.len())?;
    buf.extend_from_slice(bytes);
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<(), NnError> {
    let json = |e: serde_json::Error| NnError::Checkpoint(e.to_string());
    let mut buf = Vec::with_capacity(64 + 4 * params.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_blob(&mut buf, &serde_json::to_vec(&params.config).map_err(json)?)?;
    put_blob(&mut buf, &serde_json::to_vec(&params.init).map_err(json)?)?;
    put_u32(&mut buf, params.tensors.len())?;
    for (name, t) in &params.tensors {
        put_blob(&mut buf, name.as_bytes())?;
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams, NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes);
    let bad = NnError::Checkpoint;
    if cur.take(4).map_err(bad)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic, expected RPNN".into()));
    }
    let version = cur.u16().map_err(bad)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let blob = |cur: &mut Cursor| -> Result<Vec<u8>, NnError> {
        let n = cur.u32().map_err(bad)? as usize;
        Ok(cur.take(n).map_err(bad)?.to_vec())
    };
    let config: ModelConfig =
        serde_json::from_slice(&blob(&mut cur)?).map_err(|e| NnError::Checkpoint(format!("config: {e}")))?;
    let init: InitRecord =
        serde_json::from_slice(&blob(&mut cur)?).map_err(|e| NnError::Checkpoint(format!("init record: {e}")))?;
    let count = cur.u32().map_err(bad)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name =
            String::from_utf8(blob(&mut cur)?).map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = cur.u32().map_err(bad)? as usize;
        if ndim > 8 {
            return Err(NnError::Checkpoint(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize).map_err(bad))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| NnError::Checkpoint(format!("{name}: size overflow")))?;
        let data = cur.f32s(n).map_err(bad)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !cur.is_empty() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams { config, tensors, init };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvBlockConfig;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            input_shape: [4, 16, 8],
            conv_blocks: vec![ConvBlockConfig::same3x3(3)],
            dense: vec![],
            output_range_db: [40.0, 180.0],
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"RPNN");
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
    }

    #[test]
    fn corruption_is_reported() {
        let p = params();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        for cut in [0, 3, 6, 20, buf.len() - 1] {
            assert!(
                matches!(read_checkpoint(&buf[..cut]), Err(NnError::Checkpoint(_))),
                "{cut}"
            );
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut magic = buf;
        magic[0] = b'X';
        assert!(read_checkpoint(&magic[..]).is_err());
    }
}
