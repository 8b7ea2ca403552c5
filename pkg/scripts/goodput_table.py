"""Mean goodput for the four built-in goodput scenarios."""

from e3dapp.scenario import load_scenario, resolve, run_scenario

if __name__ == "__main__":
    print("scenario,mean_goodput_mbps")
    for name in ("baseline", "dapp_only", "incumbent_only", "dapp_incumbent"):
        print(f"{name},{run_scenario(load_scenario(resolve(name))).mean_goodput:.3f}")
