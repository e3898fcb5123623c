from levyfbsde.cli import main

main()
