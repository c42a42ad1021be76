# htclab/results.py - flat-file exports of result sets (CSV tables and a JSON summary)
import csv
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence

from htclab.metrics import FlowLog, TraceKind, flow_log_from_rows
from htclab.models import ComparisonTable, ResultSet

if TYPE_CHECKING:
    from htclab.harness import PointOutput

logger = logging.getLogger(__name__)

STATS_COLUMNS = [
    "point", "label", "scenario", "proto", "cc", "sweep", "defined",
    "throughput_bps", "avg_delay_s", "jitter_s", "delivery_ratio", "retrieval_time_s",
    "duration_s", "sent_pkts", "delivered_pkts", "retransmissions", "bits_on_wire",
    "delivered_bits", "queue_avg", "cwnd_avg", "rtt_std_s",
]
TRACE_COLUMNS = ["point", "series", "t_ns", "value"]
PACKET_COLUMNS = ["point", "t_ns", "event", "flow", "key", "bits", "retransmit", "sent_at_ns"]


def _num(value: Optional[float]) -> str:
    # fixed significant digits keep files byte-identical across platforms
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    return f"{value:.10g}"


class ResultStore:
    def write(
        self,
        out: str,
        result: ResultSet,
        outputs: Sequence["PointOutput"],
        table: Optional[ComparisonTable] = None,
    ) -> List[str]:
        """Write every export for a result set into `out`; returns the file paths"""
        directory = Path(out)
        directory.mkdir(parents=True, exist_ok=True)
        files = [self.write_stats(directory / "stats.csv", result)]
        for kind in TraceKind:
            files.append(self.write_trace(directory / f"trace_{kind.value}.csv", kind, outputs))
        if any(o.packets for o in outputs):
            files.append(self.write_packets(directory / "packets.csv", outputs))
        files.append(self.write_summary(directory / "summary.json", result, table, files))
        logger.info(f"wrote {len(files)} files to {directory}")
        return files

    def write_stats(self, path: Path, result: ResultSet) -> str:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(STATS_COLUMNS)
            for row in result.rows:
                s = row.stats
                writer.writerow([
                    row.point, row.label, row.scenario, row.proto, row.cc,
                    ";".join(f"{k}={v}" for k, v in row.sweep.items()), _num(s.defined),
                    _num(s.throughput_bps), _num(s.avg_delay_s), _num(s.jitter_s), _num(s.delivery_ratio),
                    _num(s.retrieval_time_s), _num(s.duration_s), s.sent_pkts, s.delivered_pkts,
                    s.retransmissions, s.bits_on_wire, s.delivered_bits,
                    _num(row.queue_avg), _num(row.cwnd_avg), _num(row.rtt_std_s),
                ])
        return str(path)

    def write_trace(self, path: Path, kind: TraceKind, outputs: Sequence["PointOutput"]) -> str:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for output in outputs:
                for series, t, value in output.traces.get(kind.value, []):
                    writer.writerow([output.index, series, t, _num(value)])
        return str(path)

    def write_packets(self, path: Path, outputs: Sequence["PointOutput"]) -> str:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PACKET_COLUMNS)
            for output in outputs:
                for t, event, flow, key, bits, retransmit, sent_at in output.packets:
                    writer.writerow([output.index, t, event, flow, key, bits, _num(retransmit), sent_at])
        return str(path)

    def write_summary(self, path: Path, result: ResultSet, table: Optional[ComparisonTable],
                      files: List[str]) -> str:
        summary: Dict = result.model_dump(mode="json")
        summary["files"] = [Path(f).name for f in files]
        if table is not None:
            summary["verdicts"] = table.verdicts
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return str(path)

    def read_rows(self, path: str) -> List[Dict[str, str]]:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def flow_log(self, packets_path: str, flow_id: str, point: int = 0) -> FlowLog:
        """Rebuild one flow's event log from packets.csv"""
        rows: Iterable[Dict[str, str]] = (r for r in self.read_rows(packets_path) if int(r["point"]) == point)
        return flow_log_from_rows(flow_id, rows)


result_store = ResultStore()
