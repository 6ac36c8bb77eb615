import os

import numpy as np
import pandas as pd

import analytics
import config
import shardsim
import workload


def generate_workload(path: str, count: int = 20_000, shards: int = 16, seed: int = 42) -> int:
    """Write a synthetic TaN dataset."""
    stream = workload.synth_generate(count, n=shards, rng=np.random.default_rng(seed))
    return workload.write_dataset(path, stream)


def generate_attack_stream(path: str, count: int = 5_000, shards: int = 16, fraction: float = 0.2,
                           seed: int = 43) -> int:
    """Write a mixed legitimate/malicious stream in the dataset format."""
    cfg = config.ExperimentConfig(shards=shards, malicious_fraction=fraction, seed=seed,
                                  injection_tps=1000, workload=config.WorkloadConfig(count=count))
    return workload.write_dataset(path, (item.tx for item in shardsim.build_stream(cfg)))


def create_affected_table(path: str) -> pd.DataFrame:
    df = analytics.affected_curve([2, 4, 8, 16, 32, 64], [1, 2, 3, 4])
    df.to_csv(path, index=False)
    return df


if __name__ == "__main__":
    os.makedirs('sample_data', exist_ok=True)

    print("Generating sample datasets...")

    written = generate_workload('sample_data/workload_16.txt')
    print(f"✅ Created workload_16.txt ({written} records)")

    written = generate_attack_stream('sample_data/attack_16_f020.txt')
    print(f"✅ Created attack_16_f020.txt ({written} records)")

    create_affected_table('sample_data/affected_curve.csv')
    print("✅ Created affected_curve.csv")

    print("\n📊 Sample data files created in the 'sample_data' directory!")
    print("Use them with: python cli.py analyze fit --dataset sample_data/workload_16.txt")
