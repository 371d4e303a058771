from losses.contrastive import loss_contrastive
from losses.fid import loss_fid
from losses.perf import loss_perf
from losses.rank import loss_rank
from zooscout.errors import UsageError

LOSSES = {
    "perf": loss_perf,
    "rank": loss_rank,
    "fid": loss_fid,
    "contrastive": loss_contrastive,
}


def parse_loss_set(text):
    """'perf,rank,fid' -> ('perf', 'rank', 'fid'); 'perf' is always included."""
    names = [n.strip() for n in (text.split(",") if isinstance(text, str) else text) if n.strip()]
    unknown = [n for n in names if n not in LOSSES]
    if unknown:
        raise UsageError(f"unknown loss(es): {', '.join(unknown)} (choose from {', '.join(LOSSES)})")
    if "perf" not in names:
        names.insert(0, "perf")
    return tuple(n for n in LOSSES if n in names)


def get_loss(name):
    return LOSSES[name]
