//! Head checkpoints: `AMTH`, version, task name, pooling, quantization,
//! then `w1, b1, w2, b2`.

use std::io::{Read, Write};

use super::Head;
use crate::error::{Error, Result};
use crate::pooling::PoolingSpec;
use crate::quant::{self, QuantOrder, QuantScheme};
use crate::wire::{Reader, Writer};

const MAGIC: &[u8; 4] = b"AMTH";
const VERSION: u16 = 1;

/// A trained head with the feature quantization it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub name: String,
    pub head: Head,
    pub scheme: QuantScheme,
    pub order: QuantOrder,
}

pub fn write_task_head<W: Write>(sink: W, th: &TaskHead) -> Result<()> {
    th.head.validate()?;
    let mut w = Writer::new(sink);
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    w.str16(&th.name)?;
    th.head.pooling.write(&mut w)?;
    quant::write_scheme(&mut w, &th.scheme)?;
    w.u8(match th.order {
        QuantOrder::BeforeLayerPooling => 0,
        QuantOrder::AfterLayerPooling => 1,
    })?;
    for t in [&th.head.w1, &th.head.b1, &th.head.w2, &th.head.b2] {
        w.tensor(t)?;
    }
    w.flush()
}

pub fn read_task_head<R: Read>(source: R) -> Result<TaskHead> {
    let mut r = Reader::new(source);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let name = r.str16("task name")?;
    let pooling = PoolingSpec::read(&mut r)?;
    let scheme = quant::read_scheme(&mut r)?;
    let at = r.offset();
    let order = match r.u8("quantization order")? {
        0 => QuantOrder::BeforeLayerPooling,
        1 => QuantOrder::AfterLayerPooling,
        t => return Err(Error::format(at, format!("unknown quantization order {t}"))),
    };
    let at = r.offset();
    let head = Head {
        w1: r.tensor()?,
        b1: r.tensor()?,
        w2: r.tensor()?,
        b2: r.tensor()?,
        pooling,
    };
    r.finish()?;
    head.validate()
        .map_err(|e| Error::format(at, format!("bad head tensors: {e}")))?;
    if let Some(d) = head.pooling.mha_dim() {
        if d != head.dim() {
            return Err(Error::format(at, "pooler width differs from head width"));
        }
    }
    Ok(TaskHead {
        name,
        head,
        scheme,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::{LayerPooling, MhaParams, PositionPooling};
    use crate::quant::QuantParams;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_and_truncation() {
        let mut r = rng::seeded(4);
        let spec = PoolingSpec::new(
            LayerPooling::LearnedComb {
                logits: Tensor::from_vec(vec![0.1, -0.2, 0.3]),
            },
            PositionPooling::Mha(MhaParams::identity(Tensor::from_vec(vec![0.5; 4]), 2)),
        );
        let th = TaskHead {
            name: "t".into(),
            head: Head::init(4, 3, spec, &mut r),
            scheme: QuantScheme::U8(QuantParams {
                scale: 0.25,
                zero_point: 7,
            }),
            order: QuantOrder::BeforeLayerPooling,
        };
        let mut buf = Vec::new();
        write_task_head(&mut buf, &th).unwrap();
        assert_eq!(read_task_head(&buf[..]).unwrap(), th);
        let err = read_task_head(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
