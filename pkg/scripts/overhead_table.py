"""Print the transport overhead table as CSV."""

from e3dapp import bench

if __name__ == "__main__":
    print(bench.emit_overhead_table(), end="")
