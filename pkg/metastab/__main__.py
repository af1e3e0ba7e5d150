from metastab.cli import main

main()
