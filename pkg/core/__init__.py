# Core package for jump-diffusion simulation, estimation and LAN verification
