from dfacon.cli import main

main()
