"""Three radio-site agents consolidate MR events and ship them to one
collector over loopback TCP. The first agent loses an ack and retries; the
store drops the resent batch, so stored event counts equal sent events.

Run: python demos/04_collector_loopback.py
"""
import asyncio

from arcade import collector as col
from arcade.simulator import hexagonal_cluster, sample_mr

env = hexagonal_cluster(seed=2)
agents = []
for i in range(3):
    mr, _ = sample_mr(env, 40, 5, seed=20 + i)
    agents.append((col.events_from_mr(mr), col.AgentConfig(f"rbs-{i}", salt=b"site-secret", max_batch=25)))

lost = set()


def drop_ack(agent_id, seq):
    # lose the first ack of batch 1 from rbs-0
    if agent_id == "rbs-0" and seq == 1 and not lost:
        lost.add(seq)
        return True
    return False


async def main():
    c = col.Collector(drop_ack=drop_ack)
    host, port = await c.start()
    print(f"collector on {host}:{port}")
    sent = await asyncio.gather(*(col.agent_run(ev, cfg, host, port, ack_timeout_s=0.5) for ev, cfg in agents))
    await c.wait_sessions(len(agents))
    await c.close()
    for tr in sent:
        print(f"{tr.agent_id}: {tr.events} events -> {tr.records} records in {tr.batches} batches, "
              f"{tr.retries} retries")
    for t in c.transcripts:
        print(f"collector saw {t.agent_id}: stored {t.stored}, duplicates {t.duplicates}")
    total = sum(tr.events for tr in sent)
    print(f"events sent {total}, events stored {c.store.event_count()}")


asyncio.run(main())
