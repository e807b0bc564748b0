"""Builders for small deterministic test corpora."""

import json


def fake_hash(i: int) -> str:
    return f"{i:064x}"


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fd:
        for rec in records:
            fd.write(json.dumps(rec) + "\n")


def report_record(file_hash, detections, undetected=()):
    """detections: {av: label}; undetected: AVs scanned without a hit."""
    scans = {av: {"detected": True, "result": label} for av, label in detections.items()}
    for av in undetected:
        scans[av] = {"detected": False, "result": None}
    return {"sha256": file_hash, "scans": scans}


def alias_demo_corpus():
    """A corpus that resolves andromeda/androm/gamarue/wauchos to one family.

    1500 reports carry all four spellings (both-way co-occurrence ~0.99 with
    counts >1000, so they become siblings), 11 reports carry only andromeda
    (making it the most frequent spelling, hence canonical), 5 reports give
    zbot three unrelated supporters so it survives family downgrading, and
    the last report is a many-engine report whose votes span the alias group
    plus one bad zbot vote.
    """
    records = []
    idx = 0
    for _ in range(1500):
        records.append(
            report_record(
                fake_hash(idx),
                {
                    "AlphaAV": "Trojan.Win32.Andromeda.aa",
                    "BetaAV": "Trojan.Win32.Androm.bb",
                    "GammaAV": "Trojan.Win32.Gamarue.cc",
                    "DeltaAV": "Trojan.Win32.Wauchos.dd",
                },
            )
        )
        idx += 1
    for _ in range(11):
        records.append(
            report_record(fake_hash(idx), {"AlphaAV": "Trojan.Win32.Andromeda.ee"})
        )
        idx += 1
    for _ in range(5):
        records.append(
            report_record(
                fake_hash(idx),
                {
                    "IotaAV": "Heur:Zbot.gen",
                    "PiAV": "Trojan.Win32.Zbot.ff",
                    "RhoAV": "Win32_Trojan_Zbot",
                },
            )
        )
        idx += 1
    fig_hash = fake_hash(idx)
    records.append(
        report_record(
            fig_hash,
            {
                "AlphaAV": "Trojan.Win32.Andromeda.xyz",
                "BetaAV": "Trojan.Win32.Androm.abc",
                "GammaAV": "Backdoor.Win32.Gamarue.ab",
                "DeltaAV": "Backdoor.Win32.Wauchos.gen",
                "EpsilonAV": "Trojan.Win32.Andromeda.pef",
                "ZetaAV": "Trojan.Win32.Androm.cd",
                "MuAV": "Backdoor.Win32.Andromeda.ef",
                "NuAV": "Backdoor.Win32.Gamarue.gh",
                "EtaAV": "Trojan_Backdoor",
                "ThetaAV": "Malicious!ml",
                "IotaAV": "Heur:Zbot.gen",
                "OmegaAV": "Exploit:Win32/MS08067.xyz",
            },
            undetected=("KappaAV", "LambdaAV"),
        )
    )
    return records, fig_hash
